"""GPT-2-style decoder forward pass with caller-supplied binary key masks.

The model is the standard pre-norm GPT-2 stack (learned positions, fused
qkv, tanh-GELU MLP) evaluated in float32 with numpy. The one non-standard
piece is the attention mask: a per-key binary vector applied identically at
every layer and head on top of causality, so that a token's hidden state
can depend only on keys inside its window no matter how deep the stack is.

Row reductions in softmax and layer norm accumulate in float64 before
rounding back to float32, which keeps results deterministic and inside the
reference-parity tolerance.
"""

from dataclasses import dataclass

import numpy as np

from . import containers
from .errors import ArgumentError, NumericError, SchemaError

# Additive surrogate for -inf: half the most negative finite float32.
# exp(x - max) underflows to exactly 0.0 for disallowed keys while keeping
# max-subtraction free of (-inf) - (-inf) = NaN.
MASK_NEG = np.float32(np.finfo(np.float32).min) * np.float32(0.5)

_GELU_C = np.float32(np.sqrt(2.0 / np.pi))


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    n_heads: int
    d_model: int
    vocab_size: int
    max_positions: int
    layernorm_epsilon: float = 1e-5

    def __post_init__(self):
        for name in ("n_layers", "n_heads", "d_model", "vocab_size", "max_positions"):
            if getattr(self, name) <= 0:
                raise ArgumentError(f"{name} must be positive")
        if self.d_model % self.n_heads != 0:
            raise ArgumentError(
                f"d_model={self.d_model} not divisible by n_heads={self.n_heads}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "d_model": self.d_model,
            "vocab_size": self.vocab_size,
            "max_positions": self.max_positions,
            "layernorm_epsilon": self.layernorm_epsilon,
        }


def _layer_tensor_shapes(cfg: ModelConfig) -> dict:
    d = cfg.d_model
    return {
        "attn_qkv_weight": (d, 3 * d),
        "attn_qkv_bias": (3 * d,),
        "attn_out_weight": (d, d),
        "attn_out_bias": (d,),
        "mlp_in_weight": (d, 4 * d),
        "mlp_in_bias": (4 * d,),
        "mlp_out_weight": (4 * d, d),
        "mlp_out_bias": (d,),
        "ln1_gamma": (d,),
        "ln1_beta": (d,),
        "ln2_gamma": (d,),
        "ln2_beta": (d,),
    }


def tensor_schema(cfg: ModelConfig) -> dict:
    """Name -> shape for every tensor a checkpoint must carry."""
    schema = {
        "token_embedding": (cfg.vocab_size, cfg.d_model),
        "position_embedding": (cfg.max_positions, cfg.d_model),
        "lnf_gamma": (cfg.d_model,),
        "lnf_beta": (cfg.d_model,),
    }
    for i in range(cfg.n_layers):
        for name, shape in _layer_tensor_shapes(cfg).items():
            schema[f"layers.{i}.{name}"] = shape
    return schema


@dataclass
class Checkpoint:
    """Validated weight set; immutable after load and safe to share."""

    config: ModelConfig
    tensors: dict

    def __post_init__(self):
        schema = tensor_schema(self.config)
        for name, shape in schema.items():
            containers.require_tensor(self.tensors, name, shape, path="checkpoint")
        extra = set(self.tensors) - set(schema)
        if extra:
            raise SchemaError(f"checkpoint: unexpected tensors {sorted(extra)}")

    def layer(self, i: int, name: str) -> np.ndarray:
        return self.tensors[f"layers.{i}.{name}"]


@dataclass
class AttentionMask:
    """Per-key binary vector: 1 = token participates, 0 = excluded everywhere."""

    allowed: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.allowed)
        if not np.all((arr == 0) | (arr == 1)):
            raise ArgumentError("mask entries must be exactly 0 or 1")
        if not np.any(arr == 1):
            raise ArgumentError("mask must allow at least one token")
        self.allowed = arr.astype(np.int8)

    def __len__(self) -> int:
        return len(self.allowed)

    @classmethod
    def all_ones(cls, seq_len: int) -> "AttentionMask":
        return cls(allowed=np.ones(seq_len, dtype=np.int8))


@dataclass
class HiddenStates:
    """layers[0] = embedding sum, layers[L] = block L output, layers[-1] post-lnf."""

    layers: list

    @property
    def n_layers(self) -> int:
        return len(self.layers) - 1


def load_checkpoint(path) -> Checkpoint:
    """Load and validate a CTXPW001 weight container."""
    tensors, cfg_raw = containers.read_container(path, containers.MAGIC_WEIGHTS)
    try:
        cfg = ModelConfig(
            n_layers=int(cfg_raw["n_layers"]),
            n_heads=int(cfg_raw["n_heads"]),
            d_model=int(cfg_raw["d_model"]),
            vocab_size=int(cfg_raw["vocab_size"]),
            max_positions=int(cfg_raw["max_positions"]),
            layernorm_epsilon=float(cfg_raw.get("layernorm_epsilon", 1e-5)),
        )
    except KeyError as e:
        raise SchemaError(f"{path}: config missing field {e}") from e
    return Checkpoint(config=cfg, tensors=tensors)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    containers.write_container(
        path, containers.MAGIC_WEIGHTS, ckpt.tensors, ckpt.config.to_dict()
    )


def _layer_norm(x: np.ndarray, gamma, beta, eps) -> np.ndarray:
    """Row-wise layer norm; float64 row moments, float32 result."""
    mu = np.mean(x, axis=-1, dtype=np.float64, keepdims=True)
    xc = x.astype(np.float64) - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    normed = (xc / np.sqrt(var + eps)).astype(np.float32)
    return normed * gamma + beta


def _gelu_tanh(x: np.ndarray) -> np.ndarray:
    # GPT-2's training-time activation; exactness matters for fixture parity
    x3 = x * x * x
    return np.float32(0.5) * x * (
        np.float32(1.0) + np.tanh(_GELU_C * (x + np.float32(0.044715) * x3))
    )


def _masked_softmax(scores: np.ndarray) -> np.ndarray:
    """Softmax over the last axis with float64 row sums.

    Callers pre-add MASK_NEG to disallowed entries; after max subtraction
    those underflow to exp(<= MASK_NEG/2) == 0.0, so disallowed keys carry
    exactly zero mass. Rows that are fully disallowed come out uniform and
    are never read.
    """
    m = np.max(scores, axis=-1, keepdims=True)
    e = np.exp((scores - m).astype(np.float32))
    s = np.sum(e, axis=-1, dtype=np.float64, keepdims=True)
    return (e / s).astype(np.float32)


def forward(
    ckpt: Checkpoint,
    token_ids,
    positions,
    mask: AttentionMask,
    collect_attention: bool = False,
):
    """Run the full stack, returning HiddenStates (and attention maps on request).

    Query i attends to key j iff mask.allowed[j] == 1 and j <= i; rows with
    allowed[i] == 0 hold values that never influence allowed rows. With
    collect_attention=True, also returns a list of [n_heads, T, T] float32
    attention matrices, one per layer.
    """
    cfg = ckpt.config
    ids = np.asarray(token_ids, dtype=np.int64)
    pos = np.asarray(positions, dtype=np.int64)
    if ids.size == 0:
        raise ArgumentError("empty token sequence")
    if not (ids.shape == pos.shape == (len(mask),)):
        raise ArgumentError(
            f"length mismatch: ids {ids.shape}, positions {pos.shape}, mask {len(mask)}"
        )
    if np.any(ids < 0) or np.any(ids >= cfg.vocab_size):
        raise ArgumentError("token id out of range")
    if np.any(pos < 0) or np.any(pos >= cfg.max_positions):
        raise ArgumentError(f"position out of range [0, {cfg.max_positions})")
    if np.any(np.diff(pos) <= 0):
        raise ArgumentError("positions must be strictly increasing")

    T = ids.shape[0]
    H, dh = cfg.n_heads, cfg.d_head
    eps = np.float32(cfg.layernorm_epsilon)

    # additive key-mask row combining the binary vector with causality
    key_bias = np.zeros((T, T), dtype=np.float32)
    key_bias[:, mask.allowed == 0] = MASK_NEG
    key_bias[np.triu_indices(T, k=1)] = MASK_NEG

    x = (
        ckpt.tensors["token_embedding"][ids] + ckpt.tensors["position_embedding"][pos]
    ).astype(np.float32)
    states = [x.copy()]
    attns = []

    scale = np.float32(1.0 / np.sqrt(dh))
    for li in range(cfg.n_layers):
        h = _layer_norm(x, ckpt.layer(li, "ln1_gamma"), ckpt.layer(li, "ln1_beta"), eps)
        qkv = h @ ckpt.layer(li, "attn_qkv_weight") + ckpt.layer(li, "attn_qkv_bias")
        q, k, v = np.split(qkv, 3, axis=-1)
        # [T, d] -> [H, T, dh]
        q = q.reshape(T, H, dh).transpose(1, 0, 2)
        k = k.reshape(T, H, dh).transpose(1, 0, 2)
        v = v.reshape(T, H, dh).transpose(1, 0, 2)
        scores = (q @ k.transpose(0, 2, 1)) * scale + key_bias
        probs = _masked_softmax(scores)
        if collect_attention:
            attns.append(probs.copy())
        ctx = (probs @ v).transpose(1, 0, 2).reshape(T, cfg.d_model)
        attn_out = ctx @ ckpt.layer(li, "attn_out_weight") + ckpt.layer(li, "attn_out_bias")
        x = x + attn_out

        h = _layer_norm(x, ckpt.layer(li, "ln2_gamma"), ckpt.layer(li, "ln2_beta"), eps)
        inner = _gelu_tanh(h @ ckpt.layer(li, "mlp_in_weight") + ckpt.layer(li, "mlp_in_bias"))
        x = x + (inner @ ckpt.layer(li, "mlp_out_weight") + ckpt.layer(li, "mlp_out_bias"))
        states.append(x.copy())

    # final entry is post-lnf, replacing the raw last-block output
    states[-1] = _layer_norm(
        states[-1], ckpt.tensors["lnf_gamma"], ckpt.tensors["lnf_beta"], eps
    )

    allowed_rows = mask.allowed == 1
    for mat in states:
        if not np.all(np.isfinite(mat[allowed_rows])):
            raise NumericError("non-finite hidden state on an allowed row")

    hs = HiddenStates(layers=states)
    if collect_attention:
        return hs, attns
    return hs


def extract_layer(h: HiddenStates, layer: int, token_index: int) -> np.ndarray:
    """Copy of one hidden-state row; layer 0 is the embedding sum."""
    if not 0 <= layer < len(h.layers):
        raise ArgumentError(f"layer {layer} out of range [0, {len(h.layers) - 1}]")
    mat = h.layers[layer]
    if not 0 <= token_index < mat.shape[0]:
        raise ArgumentError(f"token index {token_index} out of range [0, {mat.shape[0]})")
    return mat[token_index].copy()
