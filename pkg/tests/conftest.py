import numpy as np
import pytest
import torch

from leakseg.config import config_from_dict
from leakseg.data import load_dataset
from leakseg.synth import SynthParams, write_synthetic_corpus

torch.set_num_threads(2)


@pytest.fixture(scope="session")
def corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("corpus")
    write_synthetic_corpus(
        d, 6, SynthParams(canvas=96, noise_level=0.02, background_jitter=0.05, contrast_jitter=0.04), seed=7
    )
    return d


@pytest.fixture(scope="session")
def corpus_index(corpus_dir):
    return load_dataset(corpus_dir, "synthetic")


@pytest.fixture(scope="session")
def eval_corpus_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("eval_corpus")
    write_synthetic_corpus(
        d, 3, SynthParams(canvas=96, noise_level=0.02, background_jitter=0.05, contrast_jitter=0.04), seed=99
    )
    return d


def tiny_config(corpus_dir, eval_dir=None, **over):
    """Small-width config used across trainer/CLI tests."""
    base = {
        "data": {
            "root": str(corpus_dir),
            "layout": "synthetic",
            "n_labelled": 2,
            "eval_root": str(eval_dir) if eval_dir else None,
        },
        "ablation": {"mode": "full"},
        "model": {"gen_base_width": 16, "disc_base_width": 8},
        "optim": {
            "iterations": 3,
            "batch_labelled": 4,
            "batch_unlabelled": 4,
            "batch_fake": 4,
            "lr": 2e-4,
        },
        "seed": 0,
    }
    for dotted, value in over.items():
        node = base
        parts = dotted.split(".")
        for p in parts[:-1]:
            node = node.setdefault(p, {})
        node[parts[-1]] = value
    return config_from_dict(base)


@pytest.fixture()
def make_config(corpus_dir, eval_corpus_dir):
    def _make(**over):
        return tiny_config(corpus_dir, eval_corpus_dir, **over)

    return _make


def relative_grad_error(a: torch.Tensor, b: torch.Tensor) -> float:
    denom = max(float(a.norm()), float(b.norm()), 1e-12)
    return float((a - b).norm()) / denom


def finite_difference_gradient(fn, x: torch.Tensor, step: float = 1e-4) -> torch.Tensor:
    """Central finite differences of a scalar function w.r.t. every entry of x."""
    grad = torch.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + step
        hi = float(fn(x))
        flat[i] = orig - step
        lo = float(fn(x))
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(1234)
