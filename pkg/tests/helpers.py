"""Shared test utilities: gradient comparison and tiny fixtures."""

import numpy as np

from fsdg import autodiff as ad
from fsdg.rng import RngStream
from fsdg.tasks import Domain, Episode, sample_episode


def max_rel_err(got: np.ndarray, want: np.ndarray, atol: float = 1e-8) -> float:
    """Largest elementwise |got - want| / max(|got|, |want|, atol/rtol floor).

    Entries where both sides are below atol count as matching; this keeps
    genuinely zero gradients (dead units, cancelled means) from blowing up
    the relative measure through rounding noise.
    """
    got = np.asarray(got, dtype=np.float64)
    want = np.asarray(want, dtype=np.float64)
    assert got.shape == want.shape, f"shape mismatch {got.shape} vs {want.shape}"
    diff = np.abs(got - want)
    denom = np.maximum(np.maximum(np.abs(got), np.abs(want)), 1.0)
    rel = diff / denom
    rel[diff <= atol] = 0.0
    return float(np.max(rel)) if rel.size else 0.0


def assert_grads_match(got_tensors, want_store, rtol, atol: float = 1e-8):
    """Compare backward results against a finite-difference ParamStore."""
    names = want_store.names()
    assert len(got_tensors) == len(names)
    for t, name in zip(got_tensors, names):
        err = max_rel_err(t.data, want_store[name].data, atol=atol)
        assert err < rtol, f"{name}: relative error {err:.3e} >= {rtol:.0e}"


def noise_domain(seed: int, n_classes: int = 10, dim: int = 16,
                 per_class: int = 40, name: str = "noise") -> Domain:
    """A domain with no class signal: every class is iid standard normal."""
    stream = RngStream(seed)
    classes = {
        cid: stream.substream("class", cid).normals(per_class * dim).reshape(per_class, dim)
        for cid in range(n_classes)
    }
    return Domain(name, dim, classes)


def toy_episode(seed: int, dim: int = 6, n_way: int = 2, n_shot: int = 2,
                n_query: int = 4) -> Episode:
    dom = noise_domain(seed, n_classes=max(4, n_way), dim=dim, per_class=n_shot + n_query + 4)
    return sample_episode(dom, n_way, n_shot, n_query, RngStream(seed + 1))


def random_tensor(stream: RngStream, shape, lo: float = -2.0, hi: float = 2.0,
                  requires_grad: bool = True) -> ad.Tensor:
    n = int(np.prod(shape)) if shape else 1
    data = (stream.uniforms(n) * (hi - lo) + lo).reshape(shape)
    return ad.Tensor(data, requires_grad=requires_grad)
