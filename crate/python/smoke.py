"""Smoke test for the Python bindings.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o target/wheels
    pip install --force-reinstall target/wheels/c2e-*.whl
"""

import math
import tempfile
from pathlib import Path

import numpy as np

import c2e


def to_tensor(a):
    a = np.asarray(a, dtype=np.float64)
    return c2e.Tensor(a.ravel().tolist(), list(a.shape))


def to_numpy(t):
    return np.array(t.data).reshape(t.shape)


def main():
    # Closed-form entropy of a unit-variance 1-D Gaussian.
    h = c2e.gaussian_entropy(to_tensor([[1.0], [-1.0]]))
    assert abs(h - 0.5 * math.log(2 * math.pi * math.e)) < 1e-12, h

    rng = np.random.default_rng(0)
    z = rng.standard_normal((20, 6))
    grad = to_numpy(c2e.exact_entropy_gradient(to_tensor(z)))
    # Gradient of -1/2 ln det(z^T z).
    assert np.allclose(grad, -z @ np.linalg.inv(z.T @ z)), "closed-form gradient"
    before = c2e.compression_objective(to_tensor(z))
    after = c2e.compression_objective(to_tensor(z + 1e-2 * grad))
    assert after > before

    a = rng.standard_normal((4, 4))
    assert c2e.concavity_probe(to_tensor(a @ a.T + np.eye(4)), c2e.Tensor.eye(4))

    cfg = c2e.Config('{"width": 16, "depth": 2, "reduction": 4, "heads": 2, '
                     '"temperature_dim": 4, "batch_size": 4, "steps": 5}')
    assert cfg.widths() == [16, 12, 8]
    try:
        c2e.Config('{"mask_ratio": 1.5}')
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")

    data = c2e.synth("shapes", 16, 1)
    assert len(data) == 16 and data.images.shape == [16, 32, 32, 3]

    trainer = c2e.Trainer(cfg)
    with tempfile.TemporaryDirectory() as tmp:
        summary = trainer.run(data, tmp)
        assert summary["steps"] == 5 and math.isfinite(summary["last_loss"])
        ckpt = Path(tmp) / "checkpoint.c2e"
        model = c2e.Model.load(str(ckpt))

    feats = model.features(data.images)
    assert feats.shape == [16, 8]
    assert to_numpy(model.encode(data.images)).shape == (16, 16, 8)
    images, loss = model.reconstruct(data.images, 0.5, 3)
    assert images.shape == data.images.shape and math.isfinite(loss)

    report = c2e.linear_probe(feats, data.labels, list(range(16)), 0.25, 0)
    assert 0.0 <= report["accuracy"] <= 1.0 and report["groups_disjoint"]

    splits = c2e.fewshot_splits([i // 3 for i in range(30)], 2, [0, 1])
    assert all(len(tr) == 2 and len(te) == 8 for tr, te in splits)

    print("python smoke test passed")


if __name__ == "__main__":
    main()
