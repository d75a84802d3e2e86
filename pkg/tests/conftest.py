"""Shared fixtures: float64 gradient checks, tiny model configs, acceptance summary."""
from __future__ import annotations

from pathlib import Path

import pytest
import torch

from dualground.config import RunConfig, load_config

ROOT = Path(__file__).resolve().parents[1]
TINY_CONFIG = ROOT / "configs" / "tiny.json"

# criterion number -> (passed, detail); printed once at the end of the session
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def gradcheck(fn, *inputs, rtol=1e-4, atol=1e-8):
    """Central finite differences (eps 1e-6, float64) against autograd for a scalar ``fn``."""
    inputs = tuple(x.detach().double().clone().requires_grad_(True) for x in inputs)
    return torch.autograd.gradcheck(fn, inputs, eps=1e-6, atol=atol, rtol=rtol, raise_exception=True)


def module_gradcheck(module, loss_fn, *inputs, kwargs=None, input_names=None, rtol=1e-4, atol=1e-8):
    """Gradient check of ``loss_fn(module(*inputs, **kwargs))`` w.r.t. the inputs and every parameter.

    ``input_names`` passes the checked inputs by keyword instead of position.
    """
    module = module.double().eval()
    names = [n for n, _ in module.named_parameters()]
    params = [p.detach() for _, p in module.named_parameters()]
    n_in = len(inputs)

    def fn(*tensors):
        args, kw = tensors[:n_in], dict(kwargs or {})
        if input_names is not None:
            kw.update(zip(input_names, args))
            args = ()
        out = torch.func.functional_call(module, dict(zip(names, tensors[n_in:])), args, kw)
        return loss_fn(out)

    return gradcheck(fn, *inputs, *params, rtol=rtol, atol=atol)


def weighted_sum(seed=0):
    """A fixed random linear functional, so gradient checks see non-symmetric upstream gradients."""
    cache = {}

    def f(x):
        if x.shape not in cache:
            g = torch.Generator().manual_seed(seed)
            cache[x.shape] = torch.randn(x.shape, generator=g, dtype=torch.float64)
        return (x * cache[x.shape]).sum()

    return f


def tiny_config(**overrides) -> RunConfig:
    items = [f"{k}={v}" for k, v in overrides.items()]
    return load_config(TINY_CONFIG, items)


def small_config(max_steps=10, num_samples=24, val_samples=8, **extra) -> RunConfig:
    """Tiny model on a very small synthetic set; for plumbing tests that must run in seconds."""
    items = {
        "data.synthetic.num_samples": num_samples, "data.synthetic.T": 16, "data.synthetic.L": 6,
        "data.synthetic.d": 16, "data.synthetic.N_latent": 4, "data.val_samples": val_samples,
        "model.d": 16, "model.heads": 2, "model.N": 2, "model.pyramid_levels": 2, "model.dropout": 0.1,
        "optim.batch_size": 8, "optim.max_steps": max_steps, "optim.lr": 1e-3, "eval.every_epochs": 1,
    }
    items.update(extra)
    return load_config(None, [f"{k}={v}" for k, v in items.items()], seed=0)


@pytest.fixture
def small_cfg():
    return small_config()


@pytest.fixture(scope="session")
def small_datasets():
    from dualground.training import build_datasets

    return build_datasets(small_config())


def record(criterion: int, passed: bool, detail: str = ""):
    ACCEPTANCE[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
