import numpy as np
import pytest

from salforge.micronet import ModelConfig, build_model, forward, backward


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def small_model(variant="micro-res", size=16, seed=0):
    return build_model(ModelConfig(variant, input_size=size, seed=seed))


def randomize_bn(model, rng):
    """Non-trivial BN affine params and running stats so eval-mode BN is not the identity."""
    for k in model.params:
        if ".bn." in k:
            if k.endswith("weight"):
                model.params[k] = rng.uniform(0.5, 1.5, model.params[k].shape)
            else:
                model.params[k] = rng.normal(0, 0.2, model.params[k].shape)
    for k in model.bn_stats:
        if k.endswith("mean"):
            model.bn_stats[k] = rng.normal(0, 0.2, model.bn_stats[k].shape)
        else:
            model.bn_stats[k] = rng.uniform(0.5, 2.0, model.bn_stats[k].shape)
    return model


def hooked_pair(model, x, layers, target=1, mode="standard"):
    logits, rec = forward(model, x, hooks=layers)
    backward(model, target, mode, rec)
    return rec


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for the acceptance summary, then assert."""
    lines = request.config.__dict__.setdefault("_acceptance_lines", [])

    def record(label, ok, detail=""):
        lines.append(f"{'PASS' if ok else 'FAIL'}  {label}  {detail}".rstrip())
        assert ok, f"{label}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.__dict__.get("_acceptance_lines")
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
