import numpy as np
import pytest

from temgnet import tensor as T


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arrays, h=1e-5):
    """Central finite differences of scalar f(*arrays) w.r.t. every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            orig = a[i]
            a[i] = orig + h
            fp = f(*arrays)
            a[i] = orig - h
            fm = f(*arrays)
            a[i] = orig
            g[i] = (fp - fm) / (2 * h)
        grads.append(g)
    return grads


def rel_error(a, b):
    """max |a - b| / max(|a|, |b|, tiny), scaled per tensor."""
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8)
    return float(np.max(np.abs(a - b)) / denom)


def check_grad(build, arrays, h=1e-5, seed=0):
    """Compare analytic and finite-difference gradients of sum(build(...) * probe).

    ``build`` maps tensors to a tensor; a fixed random probe turns it into a
    scalar so every output entry contributes. Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out_shape = build(*[T.Tensor(a) for a in arrays]).shape
    probe = np.random.default_rng(seed).standard_normal(out_shape)

    def scalar(*arrs):
        return float(np.sum(build(*[T.Tensor(a) for a in arrs]).data * probe))

    leaves = [T.Tensor(a.copy(), requires_grad=True) for a in arrays]
    T.backward(T.tsum(T.mul(build(*leaves), probe)))
    numeric = numeric_grad(scalar, arrays, h)
    return max(rel_error(leaf.grad, n) for leaf, n in zip(leaves, numeric))


def write_small_run(root, n_subjects=2, n_classes=2, epochs=2, extra=""):
    """Synthetic recordings plus a fast config under ``root``; returns the config path."""
    from temgnet import cli

    inputs = []
    for s in range(1, n_subjects + 1):
        path = root / f"s{s}.temg"
        assert cli.main(["synth", "-o", str(path), "--classes", str(n_classes),
                         "--seed", str(s), "--subject", str(s)]) == 0
        inputs.append(f'"{path.name}"')
    cfg = root / "run.toml"
    cfg.write_text(
        f"""[paths]
inputs = [{", ".join(inputs)}]
run_dir = "run"

[segment]
window_ms = 300
step_ms = 100.0

[model]
model_id = 1
n_classes = {n_classes}

[train]
learning_rate = 1e-3
batch_size = 64
epochs = {epochs}
{extra}"""
    )
    return cfg


# ---------------------------------------------------------------- acceptance report

_criteria = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and rep.outcome != "passed"):
        cid, title = marker.args
        passed = rep.outcome == "passed" and not hasattr(rep, "wasxfail")
        detail = dict(item.user_properties).get("measured", "")
        _criteria[cid] = (title, passed, detail)


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(_criteria, key=lambda c: (int(c.rstrip("abc")), c)):
        title, passed, detail = _criteria[cid]
        line = f"criterion {cid:<3} {'PASS' if passed else 'FAIL'}  {title}"
        terminalreporter.write_line(line + (f"  [{detail}]" if detail else ""))
