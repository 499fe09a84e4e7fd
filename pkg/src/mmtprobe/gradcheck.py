"""Finite-difference validation of every differentiable operation and of the
full model in all three fusion modes.

Checks run in double precision with central differences (perturbation
1e-5) and compare against tape gradients at a relative-error tolerance of
1e-4. The full-model check uses a micro configuration so that every
parameter coordinate can be perturbed within the runtime budget.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutRng, Tape, Tensor
from .corpus import ParallelExample, Vocab
from .errors import ContractError
from .model import ModelConfig, TranslationModel, init_params

FD_EPS = 1e-5
FD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float = FD_TOL

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def _relative_error(a: np.ndarray, b: np.ndarray) -> float:
    """Infinity-norm relative error with a noise floor.

    Central differences at h=1e-5 on an O(1) loss resolve nothing below
    ~1e-11, so gradients whose true scale sits under 1e-6 (e.g. the
    attention key bias, which is exactly gradient-free) are compared
    absolutely against that floor instead of dividing noise by noise.
    """
    num = float(np.max(np.abs(a - b))) if a.size else 0.0
    den = max(float(np.max(np.abs(a))) if a.size else 0.0,
              float(np.max(np.abs(b))) if b.size else 0.0,
              1e-6)
    return num / den


def check_gradients(build_loss, arrays, coords_per_tensor: int | None = None,
                    seed: int = 0) -> float:
    """Max relative error between tape and central-difference gradients.

    build_loss maps a list of float64 Tensors to a scalar Tensor. With
    coords_per_tensor set, only that many randomly chosen coordinates per
    tensor are perturbed (the tape side is always exact and complete).
    """
    tensors = [Tensor(np.asarray(a, dtype=np.float64), requires_grad=True) for a in arrays]
    with Tape() as tape:
        loss = build_loss(tensors)
    tape.backward(loss)

    def eval_loss() -> float:
        ts = [Tensor(t.data) for t in tensors]
        return float(build_loss(ts).data)

    rng = np.random.default_rng(seed)
    worst = 0.0
    for t in tensors:
        if t.grad is None:
            raise ContractError("a leaf received no gradient during the check")
        flat = t.data.reshape(-1)
        n = flat.size
        if coords_per_tensor is None or coords_per_tensor >= n:
            coords = np.arange(n)
        else:
            coords = rng.choice(n, size=coords_per_tensor, replace=False)

        def measure(c: int, h: float) -> float:
            keep = flat[c]
            flat[c] = keep + h
            up = eval_loss()
            flat[c] = keep - h
            down = eval_loss()
            flat[c] = keep
            return (up - down) / (2 * h)

        grad = t.grad.reshape(-1)
        fd = np.array([measure(c, FD_EPS) for c in coords])
        scale = max(float(np.max(np.abs(grad[coords]))) if len(coords) else 0.0,
                    float(np.max(np.abs(fd))) if len(coords) else 0.0, 1e-6)
        # A perturbation that crosses a relu kink measures a chord, not the
        # derivative; re-measure suspicious coordinates at a smaller step
        # where the crossing disappears.
        for j, c in enumerate(coords):
            if abs(grad[c] - fd[j]) / scale >= FD_TOL:
                fd[j] = measure(c, FD_EPS / 10.0)
        worst = max(worst, _relative_error(grad[coords], fd))
    return worst


# ---------------------------------------------------------------------------
# per-operation checks
# ---------------------------------------------------------------------------

def _op_checks(seed: int):
    rng = np.random.default_rng(seed)
    m, k, n = rng.integers(2, 6, size=3)
    a = rng.standard_normal((m, k))
    b = rng.standard_normal((k, n))
    w = rng.standard_normal((m, n))
    x = rng.standard_normal((3, 5))
    x_relu = x.copy()
    x_relu[np.abs(x_relu) < 0.05] += 0.1
    gain = rng.standard_normal(5)
    bias = rng.standard_normal(5)
    probe = rng.standard_normal((3, 5))
    batch_a = rng.standard_normal((2, 3, 4))
    batch_b = rng.standard_normal((2, 4, 3))
    table = rng.standard_normal((6, 4))
    ids = rng.integers(0, 6, size=(2, 3))
    logits = rng.standard_normal((4, 7))
    targets = rng.integers(1, 7, size=4)
    targets[0] = 0
    droprng_seed = int(rng.integers(0, 2**31))

    return {
        "matmul": (lambda ts: ad.sum_all(ad.mul(ad.matmul(ts[0], ts[1]), ts[2])),
                   [a, b, w]),
        "matmul_batched": (lambda ts: ad.sum_all(ad.matmul(ts[0], ts[1])),
                           [batch_a, batch_b]),
        "softmax_rows": (lambda ts: ad.sum_all(ad.mul(ad.softmax_rows(ts[0]), ts[1])),
                         [x, probe]),
        "layer_norm": (lambda ts: ad.sum_all(ad.mul(ad.layer_norm(ts[0], ts[1], ts[2]), ts[3])),
                       [x, gain, bias, probe]),
        "add_broadcast": (lambda ts: ad.sum_all(ad.add(ts[0], ts[1])), [x, bias]),
        "mul": (lambda ts: ad.sum_all(ad.mul(ts[0], ts[1])), [x, probe]),
        "scale": (lambda ts: ad.sum_all(ad.scale(ts[0], 1.7)), [x]),
        "sigmoid": (lambda ts: ad.sum_all(ad.mul(ad.sigmoid(ts[0]), ts[1])), [x, probe]),
        "relu": (lambda ts: ad.sum_all(ad.mul(ad.relu(ts[0]), ts[1])), [x_relu, probe]),
        "dropout": (lambda ts: ad.sum_all(
            ad.dropout(ts[0], 0.4, rng=DropoutRng(droprng_seed), train=True)), [x]),
        "reshape_permute": (lambda ts: ad.sum_all(
            ad.mul(ad.permute(ad.reshape(ts[0], (2, 2, 3, 2)), (0, 2, 1, 3)),
                   Tensor(np.ones((2, 3, 2, 2))))), [batch_a]),
        "slice_axis": (lambda ts: ad.sum_all(ad.slice_axis(ts[0], 1, 1, 3)), [batch_a]),
        "take_rows": (lambda ts: ad.sum_all(ad.take_rows(ts[0], ids)), [table]),
        "cross_entropy": (lambda ts: ad.cross_entropy_label_smoothed(
            ts[0], targets, smoothing=0.1, pad_id=0), [logits]),
    }


def check_operations(seeds=range(10)) -> list[CheckResult]:
    """Finite-difference check every operation over the given seeds."""
    worst: dict[str, float] = {}
    for seed in seeds:
        for name, (fn, arrays) in _op_checks(seed).items():
            err = check_gradients(fn, arrays, seed=seed)
            worst[name] = max(worst.get(name, 0.0), err)
    return [CheckResult(name, err) for name, err in sorted(worst.items())]


# ---------------------------------------------------------------------------
# full-model checks
# ---------------------------------------------------------------------------

def micro_config(fusion_mode: str, raw_qkv: bool = False) -> ModelConfig:
    return ModelConfig(
        src_vocab=12, tgt_vocab=12, enc_layers=1, dec_layers=1,
        d_model=8, d_ffn=12, heads=2, dropout=0.0, label_smoothing=0.1,
        fusion_mode=fusion_mode, d_img=6 if fusion_mode != "text_only" else 0,
        max_len=16, raw_qkv=raw_qkv,
    )


def _micro_batch(seed: int):
    rng = np.random.default_rng(seed)
    vocab = Vocab([f"w{i}" for i in range(8)])
    examples = []
    for i in range(2):
        length = int(rng.integers(3, 6))
        src = [f"w{rng.integers(0, 8)}" for _ in range(length)]
        tgt = [f"w{rng.integers(0, 8)}" for _ in range(length)]
        examples.append(ParallelExample(src, tgt, image_id=f"img{i}"))
    feats = rng.standard_normal((2, 3, 6))
    return examples, vocab, feats


def check_full_model(fusion_mode: str, seed: int = 0,
                     coords_per_tensor: int | None = None,
                     raw_qkv: bool = False) -> CheckResult:
    """Gradient-check every model parameter on a 2-sentence micro-batch."""
    cfg = micro_config(fusion_mode, raw_qkv)
    examples, vocab, feats = _micro_batch(seed)
    base = init_params(cfg, seed=seed, dtype=np.float64)
    names = list(base)
    arrays = [base[n].data for n in names]

    def build_loss(tensors):
        params = {n: t for n, t in zip(names, tensors)}
        model = TranslationModel(cfg, params)
        features = feats if fusion_mode != "text_only" else None
        return model.forward_loss(examples, vocab, vocab, features=features,
                                  has_cls=False, rng=None)

    err = check_gradients(build_loss, arrays, coords_per_tensor=coords_per_tensor, seed=seed)
    label = fusion_mode + ("_raw_qkv" if raw_qkv else "")
    return CheckResult(f"full_model[{label}]", err)


def run_suite(op_seeds=range(10), model_seeds=range(10),
              coords_per_tensor: int | None = 3) -> list[CheckResult]:
    """The whole gradient suite: ops exhaustively, models spot-checked.

    The per-model spot check perturbs coords_per_tensor random coordinates
    of every parameter tensor for each seed; one seed per mode runs with
    every coordinate of every parameter to pin the complete backward path.
    """
    results = check_operations(op_seeds)
    for mode in ("text_only", "gated", "selective_attention"):
        worst = check_full_model(mode, seed=0, coords_per_tensor=None).max_rel_error
        for seed in model_seeds:
            res = check_full_model(mode, seed=seed, coords_per_tensor=coords_per_tensor)
            worst = max(worst, res.max_rel_error)
        results.append(CheckResult(f"full_model[{mode}]", worst))
    results.append(check_full_model("selective_attention", seed=1, raw_qkv=True))
    return results
