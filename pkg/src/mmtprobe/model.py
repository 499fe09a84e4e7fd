"""Tiny transformer encoder-decoder with three image-fusion modes.

The encoder is a stack of pre-norm self-attention + feedforward blocks
over embedded, position-encoded source tokens. Image patch features enter
through a linear projection into the model dimension and are merged with
the encoder output either by a sigmoid gate over a pooled image vector
(gated mode) or by single-head attention from text states over the patch
sequence whose output then feeds the same gate (selective attention). The
decoder adds causal self-attention and cross-attention over the fused
encoder states.

Checkpoint format: magic "MMTC", version u32, u32-length-prefixed config
JSON, then every parameter in declared order as little-endian float32 with
a per-tensor shape header (ndim u8, dims u32 each).
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import DropoutRng, Tensor
from .corpus import BOS_ID, EOS_ID, PAD_ID, ParallelExample
from .errors import CheckpointError, ConfigError, ContractError, FormatError, ShapeError

CKPT_MAGIC = b"MMTC"
CKPT_VERSION = 1

FUSION_MODES = ("text_only", "gated", "selective_attention")

NEG_INF = -1e9  # additive attention mask value; finite to keep outputs finite


@dataclass(frozen=True)
class ModelConfig:
    src_vocab: int
    tgt_vocab: int
    enc_layers: int = 4
    dec_layers: int = 4
    d_model: int = 128
    d_ffn: int = 256
    heads: int = 4
    dropout: float = 0.3
    label_smoothing: float = 0.1
    fusion_mode: str = "text_only"
    d_img: int = 0
    max_len: int = 64
    scalar_gate: bool = False
    raw_qkv: bool = False

    def __post_init__(self):
        if self.d_model % self.heads != 0:
            raise ConfigError(
                f"d_model {self.d_model} not divisible by heads {self.heads}"
            )
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must be in [0, 1), got {self.dropout}")
        if not 0.0 <= self.label_smoothing < 1.0:
            raise ConfigError(f"label smoothing must be in [0, 1), got {self.label_smoothing}")
        if self.fusion_mode not in FUSION_MODES:
            raise ConfigError(f"unknown fusion mode {self.fusion_mode!r}; expected {FUSION_MODES}")
        if self.fusion_mode != "text_only" and self.d_img < 1:
            raise ConfigError(f"fusion mode {self.fusion_mode!r} requires d_img >= 1")
        for name in ("src_vocab", "tgt_vocab", "enc_layers", "dec_layers",
                     "d_model", "d_ffn", "heads", "max_len"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        data = json.loads(text)
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**data)


def param_specs(cfg: ModelConfig) -> list[tuple[str, tuple, str]]:
    """Declared (name, shape, kind) of every parameter, in checkpoint order.

    kind selects the initializer: matrix (uniform Xavier), bias (zeros),
    gain (ones).
    """
    d, f = cfg.d_model, cfg.d_ffn
    specs: list[tuple[str, tuple, str]] = [
        ("src_embed", (cfg.src_vocab, d), "matrix"),
        ("tgt_embed", (cfg.tgt_vocab, d), "matrix"),
    ]

    def attention(prefix):
        for w in ("wq", "wk", "wv", "wo"):
            specs.append((f"{prefix}.{w}", (d, d), "matrix"))
            specs.append((f"{prefix}.b{w[1]}", (d,), "bias"))

    def norm(prefix):
        specs.append((f"{prefix}.gain", (d,), "gain"))
        specs.append((f"{prefix}.bias", (d,), "bias"))

    def ffn(prefix):
        specs.append((f"{prefix}.w1", (d, f), "matrix"))
        specs.append((f"{prefix}.b1", (f,), "bias"))
        specs.append((f"{prefix}.w2", (f, d), "matrix"))
        specs.append((f"{prefix}.b2", (d,), "bias"))

    for i in range(cfg.enc_layers):
        norm(f"enc.{i}.san.ln")
        attention(f"enc.{i}.san")
        norm(f"enc.{i}.ffn.ln")
        ffn(f"enc.{i}.ffn")
    for i in range(cfg.dec_layers):
        norm(f"dec.{i}.san.ln")
        attention(f"dec.{i}.san")
        norm(f"dec.{i}.cross.ln")
        attention(f"dec.{i}.cross")
        norm(f"dec.{i}.ffn.ln")
        ffn(f"dec.{i}.ffn")
    norm("dec.final_ln")
    specs.append(("out.w", (d, cfg.tgt_vocab), "readout"))
    specs.append(("out.b", (cfg.tgt_vocab,), "bias"))

    if cfg.fusion_mode != "text_only":
        specs.append(("fuse.w_img", (cfg.d_img, d), "matrix"))
        specs.append(("fuse.u", (d, d), "matrix"))
        specs.append(("fuse.v", (d, d), "matrix"))
        if cfg.fusion_mode == "selective_attention" and not cfg.raw_qkv:
            for w in ("wq", "wk", "wv"):
                specs.append((f"fuse.attn.{w}", (d, d), "matrix"))
    return specs


def param_count(cfg: ModelConfig) -> int:
    """Total parameter count; a pure function of the configuration."""
    return sum(int(np.prod(shape)) for _, shape, _ in param_specs(cfg))


def init_params(cfg: ModelConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Seeded parameter initialization in declared order."""
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    for name, shape, kind in param_specs(cfg):
        if kind in ("matrix", "readout"):
            fan_in, fan_out = shape[0], shape[-1]
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-bound, bound, size=shape)
            if kind == "readout":
                # Keep the initial predictive distribution near uniform so
                # untrained loss sits at ~ln(vocab).
                data *= 0.25
        elif kind == "bias":
            data = np.zeros(shape)
        elif kind == "gain":
            data = np.ones(shape)
        else:  # pragma: no cover
            raise ConfigError(f"unknown parameter kind {kind!r}")
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return params


def sinusoidal_positions(max_len: int, d_model: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(max_len)[:, None].astype(np.float64)
    dim = np.arange(0, d_model, 2).astype(np.float64)
    angle = pos / np.power(10000.0, dim / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table.astype(dtype)


def prepare_batch(examples: list[ParallelExample], src_vocab, tgt_vocab, max_len: int):
    """Pad a batch to rectangular id arrays.

    Returns (src_ids [B,L], tgt_in [B,T+1] starting with BOS, tgt_out
    [B,T+1] ending with EOS); pads use PAD_ID.
    """
    src_len = max(len(e.src) for e in examples)
    tgt_len = max(len(e.tgt) for e in examples) + 1  # room for BOS/EOS
    if src_len > max_len or tgt_len > max_len:
        raise ContractError(
            f"batch exceeds max_len={max_len}: source {src_len}, target {tgt_len}"
        )
    b = len(examples)
    src_ids = np.full((b, src_len), PAD_ID, dtype=np.int64)
    tgt_in = np.full((b, tgt_len), PAD_ID, dtype=np.int64)
    tgt_out = np.full((b, tgt_len), PAD_ID, dtype=np.int64)
    for i, e in enumerate(examples):
        s = src_vocab.encode(e.src)
        t = tgt_vocab.encode(e.tgt)
        src_ids[i, : len(s)] = s
        tgt_in[i, 0] = BOS_ID
        tgt_in[i, 1: len(t) + 1] = t
        tgt_out[i, : len(t)] = t
        tgt_out[i, len(t)] = EOS_ID
    return src_ids, tgt_in, tgt_out


class TranslationModel:
    """Config + parameters + the forward computations over them.

    Training mutates the parameter tensors through their grad buffers; a
    model whose parameters are no longer updated is effectively frozen and
    safe for concurrent evaluation-mode inference.
    """

    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]):
        expected = param_specs(cfg)
        if [n for n, _, _ in expected] != list(params):
            raise ConfigError("parameter names do not match the declared order for this config")
        for name, shape, _ in expected:
            if params[name].shape != shape:
                raise ShapeError(
                    f"parameter {name}: expected shape {shape}, got {params[name].shape}"
                )
        self.cfg = cfg
        self.params = params
        self.dtype = params["src_embed"].data.dtype
        self.pos_table = sinusoidal_positions(cfg.max_len, cfg.d_model, self.dtype)

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> "TranslationModel":
        return cls(cfg, init_params(cfg, seed, dtype))

    # -- small helpers ------------------------------------------------------

    def _p(self, name: str) -> Tensor:
        return self.params[name]

    def _linear(self, x: Tensor, w: str, b: str) -> Tensor:
        return ad.add(ad.matmul(x, self._p(w)), self._p(b))

    def _norm(self, x: Tensor, prefix: str) -> Tensor:
        return ad.layer_norm(x, self._p(f"{prefix}.gain"), self._p(f"{prefix}.bias"))

    def _dropout(self, x: Tensor, rng: DropoutRng | None) -> Tensor:
        return ad.dropout(x, self.cfg.dropout, rng=rng, train=rng is not None)

    def _heads_split(self, x: Tensor) -> Tensor:
        b, length, d = x.shape
        h = self.cfg.heads
        x = ad.reshape(x, (b, length, h, d // h))
        x = ad.permute(x, (0, 2, 1, 3))
        return ad.reshape(x, (b * h, length, d // h))

    def _heads_merge(self, x: Tensor, b: int) -> Tensor:
        bh, length, dk = x.shape
        h = self.cfg.heads
        x = ad.reshape(x, (b, h, length, dk))
        x = ad.permute(x, (0, 2, 1, 3))
        return ad.reshape(x, (b, length, h * dk))

    def _mha(self, q_in: Tensor, kv_in: Tensor, prefix: str, mask_add) -> Tensor:
        """Multi-head attention; mask_add is an additive [B,Lq,Lk] array or None."""
        b = q_in.shape[0]
        dk = self.cfg.d_model // self.cfg.heads
        q = self._heads_split(self._linear(q_in, f"{prefix}.wq", f"{prefix}.bq"))
        k = self._heads_split(self._linear(kv_in, f"{prefix}.wk", f"{prefix}.bk"))
        v = self._heads_split(self._linear(kv_in, f"{prefix}.wv", f"{prefix}.bv"))
        scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(dk))
        if mask_add is not None:
            tiled = np.repeat(mask_add.astype(self.dtype), self.cfg.heads, axis=0)
            scores = ad.add(scores, Tensor(tiled))
        ctx = ad.matmul(ad.softmax_rows(scores), v)
        return self._linear(self._heads_merge(ctx, b), f"{prefix}.wo", f"{prefix}.bo")

    def _embed(self, table: str, ids: np.ndarray, rng: DropoutRng | None) -> Tensor:
        length = ids.shape[1]
        if length > self.cfg.max_len:
            raise ContractError(f"sequence length {length} exceeds max_len {self.cfg.max_len}")
        x = ad.scale(ad.take_rows(self._p(table), ids), np.sqrt(self.cfg.d_model))
        x = ad.add(x, Tensor(self.pos_table[:length]))
        return self._dropout(x, rng)

    @staticmethod
    def _pad_mask(key_pad: np.ndarray, q_len: int) -> np.ndarray:
        """Additive [B, q_len, Lk] mask that hides padded key positions."""
        b, lk = key_pad.shape
        mask = np.where(key_pad[:, None, :], NEG_INF, 0.0)
        return np.broadcast_to(mask, (b, q_len, lk)).copy()

    # -- encoder ------------------------------------------------------------

    def encode_text(self, src_ids: np.ndarray, rng: DropoutRng | None = None) -> Tensor:
        """Pre-norm SAN+FFN stack over embedded + position-encoded tokens."""
        if src_ids.max(initial=0) >= self.cfg.src_vocab:
            raise IndexError(
                f"source id {int(src_ids.max())} out of range for vocab {self.cfg.src_vocab}"
            )
        src_pad = src_ids == PAD_ID
        x = self._embed("src_embed", src_ids, rng)
        mask = self._pad_mask(src_pad, src_ids.shape[1]) if src_pad.any() else None
        for i in range(self.cfg.enc_layers):
            normed = self._norm(x, f"enc.{i}.san.ln")
            att = self._mha(normed, normed, f"enc.{i}.san", mask)
            x = ad.add(x, self._dropout(att, rng))
            y = self._norm(x, f"enc.{i}.ffn.ln")
            y = self._linear(ad.relu(self._linear(y, f"enc.{i}.ffn.w1", f"enc.{i}.ffn.b1")),
                             f"enc.{i}.ffn.w2", f"enc.{i}.ffn.b2")
            x = ad.add(x, self._dropout(y, rng))
        return x

    # -- fusion -------------------------------------------------------------

    def project_image(self, patches) -> Tensor:
        """Linear map of each patch row into the model dimension; no bias."""
        feats = patches if isinstance(patches, Tensor) else Tensor(
            np.asarray(patches, dtype=self.dtype))
        if feats.shape[-1] != self.cfg.d_img:
            raise ShapeError(
                f"feature dimension mismatch: expected {self.cfg.d_img}, got {feats.shape[-1]}"
            )
        return ad.matmul(feats, self._p("fuse.w_img"))

    def selective_attention(self, h_text: Tensor, h_img: Tensor, return_weights: bool = False):
        """Single-head attention: text states query the patch sequence.

        With raw_qkv the representations are used directly as query, key,
        and value; otherwise learned projections are applied first. The
        scale is 1/sqrt(d_model) either way (single head).
        """
        if h_img.shape[1] < 1:
            raise ContractError("selective attention over an empty patch sequence")
        if self.cfg.raw_qkv:
            q, k, v = h_text, h_img, h_img
        else:
            q = ad.matmul(h_text, self._p("fuse.attn.wq"))
            k = ad.matmul(h_img, self._p("fuse.attn.wk"))
            v = ad.matmul(h_img, self._p("fuse.attn.wv"))
        scores = ad.scale(ad.matmul(q, ad.permute(k, (0, 2, 1))), 1.0 / np.sqrt(self.cfg.d_model))
        weights = ad.softmax_rows(scores)
        out = ad.matmul(weights, v)
        if return_weights:
            return out, weights
        return out

    def pool_image_for_gate(self, h_img: Tensor, has_cls: bool, length: int) -> Tensor:
        """CLS row if present, else mean over patches, broadcast to length rows."""
        b, p, d = h_img.shape
        if p < 1:
            raise ContractError("cannot pool an empty patch sequence")
        if has_cls:
            pooled = ad.slice_axis(h_img, 1, 0, 1)  # [B,1,d]
        else:
            ones = Tensor(np.full((b, 1, p), 1.0 / p, dtype=self.dtype))
            pooled = ad.matmul(ones, h_img)
        tile = Tensor(np.ones((b, length, 1), dtype=self.dtype))
        return ad.matmul(tile, pooled)

    def gated_fuse(self, h_text: Tensor, h_ctx: Tensor) -> Tensor:
        """Convex combination of text and image context under a sigmoid gate."""
        if h_text.shape != h_ctx.shape:
            raise ShapeError(
                f"gated fusion operands disagree: {h_text.shape} vs {h_ctx.shape}"
            )
        pre = ad.add(ad.matmul(h_text, self._p("fuse.u")), ad.matmul(h_ctx, self._p("fuse.v")))
        if self.cfg.scalar_gate:
            d = self.cfg.d_model
            col = Tensor(np.full((d, 1), 1.0 / d, dtype=self.dtype))
            lam = ad.sigmoid(ad.matmul(pre, col))  # [B,L,1]
            lam = ad.matmul(lam, Tensor(np.ones((1, d), dtype=self.dtype)))
        else:
            lam = ad.sigmoid(pre)
        one = Tensor(np.asarray(1.0, dtype=self.dtype))
        keep = ad.add(ad.scale(lam, -1.0), one)
        return ad.add(ad.mul(keep, h_text), ad.mul(lam, h_ctx))

    def fuse(self, h_text: Tensor, patches, has_cls: bool, return_attention: bool = False):
        """Merge encoder output with image features per the fusion mode."""
        mode = self.cfg.fusion_mode
        if mode == "text_only":
            return (h_text, None) if return_attention else h_text
        if patches is None:
            raise ConfigError(f"fusion mode {mode!r} requires image features")
        h_img = self.project_image(patches)
        attention = None
        if mode == "selective_attention":
            h_ctx, weights = self.selective_attention(h_text, h_img, return_weights=True)
            attention = weights.data
        else:
            h_ctx = self.pool_image_for_gate(h_img, has_cls, h_text.shape[1])
        fused = self.gated_fuse(h_text, h_ctx)
        if return_attention:
            return fused, attention
        return fused

    # -- decoder ------------------------------------------------------------

    def decode_logits(self, tgt_in: np.ndarray, fused: Tensor, src_pad: np.ndarray,
                      rng: DropoutRng | None = None) -> Tensor:
        """Teacher-forced logits [B,T,V] with causal self-attention."""
        if tgt_in.max(initial=0) >= self.cfg.tgt_vocab:
            raise IndexError(
                f"target id {int(tgt_in.max())} out of range for vocab {self.cfg.tgt_vocab}"
            )
        b, t = tgt_in.shape
        x = self._embed("tgt_embed", tgt_in, rng)
        causal = np.triu(np.full((t, t), NEG_INF), k=1)
        causal = np.broadcast_to(causal, (b, t, t)).copy()
        cross_mask = self._pad_mask(src_pad, t) if src_pad.any() else None
        for i in range(self.cfg.dec_layers):
            normed = self._norm(x, f"dec.{i}.san.ln")
            att = self._mha(normed, normed, f"dec.{i}.san", causal)
            x = ad.add(x, self._dropout(att, rng))
            cross = self._mha(self._norm(x, f"dec.{i}.cross.ln"), fused,
                              f"dec.{i}.cross", cross_mask)
            x = ad.add(x, self._dropout(cross, rng))
            y = self._norm(x, f"dec.{i}.ffn.ln")
            y = self._linear(ad.relu(self._linear(y, f"dec.{i}.ffn.w1", f"dec.{i}.ffn.b1")),
                             f"dec.{i}.ffn.w2", f"dec.{i}.ffn.b2")
            x = ad.add(x, self._dropout(y, rng))
        return self._linear(self._norm(x, "dec.final_ln"), "out.w", "out.b")

    def decode_step(self, prefixes: np.ndarray, fused: Tensor, src_pad: np.ndarray) -> np.ndarray:
        """Next-token logits [N,V] for each decode prefix (evaluation mode)."""
        prefixes = np.atleast_2d(np.asarray(prefixes, dtype=np.int64))
        if prefixes.shape[1] == 0 or np.any(prefixes[:, 0] != BOS_ID):
            raise ContractError("decode prefixes must be non-empty and start with BOS")
        logits = self.decode_logits(prefixes, fused, src_pad, rng=None)
        return logits.data[:, -1, :]

    # -- losses -------------------------------------------------------------

    def forward_loss(self, examples, src_vocab, tgt_vocab, features=None,
                     has_cls: bool = False, rng: DropoutRng | None = None,
                     return_logits: bool = False):
        """Teacher-forced label-smoothed loss, mean over non-pad target tokens."""
        if not examples:
            raise ContractError("forward_loss over an empty batch")
        if self.cfg.fusion_mode != "text_only" and features is None:
            raise ConfigError(f"fusion mode {self.cfg.fusion_mode!r} requires features")
        src_ids, tgt_in, tgt_out = prepare_batch(examples, src_vocab, tgt_vocab,
                                                 self.cfg.max_len)
        h_text = self.encode_text(src_ids, rng)
        feats = features if self.cfg.fusion_mode != "text_only" else None
        fused = self.fuse(h_text, feats, has_cls)
        logits = self.decode_logits(tgt_in, fused, src_ids == PAD_ID, rng)
        loss = ad.cross_entropy_label_smoothed(
            logits, tgt_out, self.cfg.label_smoothing, PAD_ID
        )
        if return_logits:
            return loss, logits, tgt_out
        return loss


def stack_features(records, examples) -> tuple[np.ndarray, bool]:
    """Stack per-example patch records into one [B,p,d_img] array."""
    by_id = {r.image_id: r for r in records}
    rows = []
    has_cls = None
    for e in examples:
        rec = by_id.get(e.image_id)
        if rec is None:
            raise ContractError(f"no features for image id {e.image_id!r}")
        if has_cls is None:
            has_cls = rec.has_cls
        if rec.has_cls != has_cls:
            raise ContractError("mixed has_cls values within one batch")
        rows.append(rec.patches)
    shapes = {r.shape for r in rows}
    if len(shapes) > 1:
        raise ShapeError(f"patch records disagree in shape within a batch: {sorted(shapes)}")
    return np.stack(rows), bool(has_cls)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
    blob = cfg.to_json().encode("utf-8")
    chunks = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(blob)), blob]
    for name, shape, _ in param_specs(cfg):
        t = params[name]
        if t.shape != shape:
            raise CheckpointError(f"parameter {name} has shape {t.shape}, expected {shape}")
        chunks.append(struct.pack("<B", len(shape)))
        chunks.append(struct.pack(f"<{len(shape)}I", *shape))
        chunks.append(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> tuple[ModelConfig, dict[str, Tensor]]:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n, what):
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"{path}: truncated while reading {what}", offset=pos)
        out = buf[pos: pos + n]
        pos += n
        return out

    if take(4, "magic") != CKPT_MAGIC:
        raise FormatError(f"{path}: bad magic (expected {CKPT_MAGIC!r})", offset=0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}", offset=4)
    (cfg_len,) = struct.unpack("<I", take(4, "config length"))
    try:
        cfg = ModelConfig.from_json(take(cfg_len, "config").decode("utf-8"))
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: unreadable config block: {exc}", offset=12) from exc
    params: dict[str, Tensor] = {}
    for name, shape, _ in param_specs(cfg):
        (ndim,) = struct.unpack("<B", take(1, f"{name} ndim"))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} dims"))
        if dims != shape:
            raise FormatError(
                f"{path}: parameter {name} has shape {dims}, expected {shape}", offset=pos
            )
        data = np.frombuffer(take(4 * int(np.prod(dims)), f"{name} data"), dtype="<f4")
        params[name] = Tensor(data.reshape(dims).copy(), requires_grad=True)
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes", offset=pos)
    return cfg, params
