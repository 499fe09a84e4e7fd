import numpy as np
import pytest

from mmtprobe import autodiff as ad
from mmtprobe.gradcheck import (
    FD_TOL,
    check_full_model,
    check_gradients,
    check_operations,
    micro_config,
    run_suite,
)


def test_operation_checks_cover_every_differentiable_op():
    from mmtprobe.gradcheck import _op_checks

    names = set(_op_checks(0))
    for required in ("matmul", "softmax_rows", "layer_norm", "sigmoid", "relu",
                     "dropout", "cross_entropy", "take_rows", "add_broadcast",
                     "mul", "scale", "reshape_permute", "slice_axis"):
        assert required in names


def test_operations_pass_over_ten_seeds():
    results = check_operations(seeds=range(10))
    for r in results:
        assert r.passed, f"{r.name}: {r.max_rel_error:.3e}"


@pytest.mark.parametrize("mode", ["text_only", "gated", "selective_attention"])
def test_full_model_every_coordinate(mode):
    result = check_full_model(mode, seed=0, coords_per_tensor=None)
    assert result.passed, f"{result.name}: {result.max_rel_error:.3e}"


def test_raw_qkv_model_gradients():
    result = check_full_model("selective_attention", seed=2, raw_qkv=True,
                              coords_per_tensor=4)
    assert result.passed


def test_check_gradients_passes_composite_and_metric_detects_errors():
    x = np.random.default_rng(0).standard_normal((3,))

    def build(tensors):
        t = tensors[0]
        return ad.sum_all(ad.scale(ad.mul(t, ad.mul(t, t)), 0.5))

    assert check_gradients(build, [x]) < FD_TOL

    from mmtprobe.gradcheck import _relative_error
    good = np.array([1.0, 2.0, 3.0])
    assert _relative_error(good, good * 1.01) > FD_TOL


def test_micro_config_is_small():
    from mmtprobe.model import param_count

    assert param_count(micro_config("selective_attention")) < 5000


def test_run_suite_smoke():
    results = run_suite(op_seeds=range(1), model_seeds=range(1), coords_per_tensor=2)
    assert all(r.passed for r in results)
    names = {r.name for r in results}
    assert "full_model[text_only]" in names
    assert "full_model[selective_attention_raw_qkv]" in names
