import pytest

from app.errors import ConfigurationError
from app.ndtensor import ops
from app.schemas.config import LossConfig
from app.services.gradcheck import CHECKS, ELEMENTWISE, ELEMENTWISE_TOLERANCE, run_suite


def test_full_suite_passes():
    results = run_suite(tolerance=1e-4)
    assert [r.name for r in results] == list(CHECKS)
    failures = [r.line() for r in results if not r.passed]
    assert not failures


def test_elementwise_checks_use_the_tighter_tolerance():
    results = run_suite(tolerance=1e-3, names=["exp", "softmax"])
    by_name = {r.name: r for r in results}
    assert "exp" in ELEMENTWISE and by_name["exp"].tolerance == ELEMENTWISE_TOLERANCE
    assert by_name["softmax"].tolerance == 1e-3


def test_conventional_loss_settings_pass():
    cfg = LossConfig(kind="PatchDisc", infonce_sign="conventional", sim_constraint=True, tau=0.2)
    assert all(r.passed for r in run_suite(loss_cfg=cfg, names=["total_loss", "patch_disc"]))


def test_a_wrong_vjp_is_caught(monkeypatch):
    def bad_square(x):
        return ops._emit("square", x.data * x.data, (x,), lambda g: (3.0 * x.data * g,))

    monkeypatch.setattr(ops, "square", bad_square)
    (result,) = run_suite(names=["square"])
    assert not result.passed
    assert result.max_rel_err > 0.1


def test_suite_is_seeded():
    first = run_suite(seed=5, names=["layer_norm", "cosine_sim"])
    second = run_suite(seed=5, names=["layer_norm", "cosine_sim"])
    assert [r.max_rel_err for r in first] == [r.max_rel_err for r in second]


def test_results_report_absolute_error():
    (result,) = run_suite(names=["matmul"])
    assert 0.0 <= result.max_abs_err < 1e-6
    assert f"max_abs_err={result.max_abs_err:.3e}" in result.line()


def test_bad_arguments():
    with pytest.raises(ConfigurationError):
        run_suite(names=["no_such_check"])
    with pytest.raises(ConfigurationError):
        run_suite(tolerance=-1.0)
