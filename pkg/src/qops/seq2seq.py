"""GRU encoder-decoder with additive attention over POS-tag embeddings.

The encoder reads POS-tag embeddings; the decoder emits one distribution
over semantic operators per step. Shapes follow the row-vector convention
of :mod:`qops.autodiff`: a state is ``1 x d`` and a weight mapping
``in -> out`` is stored as ``in x out``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace
from typing import Iterator

import numpy as np

from qops import autodiff as ad
from qops.autodiff import Tensor
from qops.data import EOS_ID, PAD_ID, SOS_ID

GATES = ("W_z", "U_z", "b_z", "W_r", "U_r", "b_r", "W_h", "U_h", "b_h")
INIT_SCALE = 0.08


@dataclass(frozen=True)
class ModelConfig:
    enc_emb_dim: int = 3
    enc_hid_dim: int = 3
    dec_emb_dim: int = 3
    dec_hid_dim: int = 3
    pos_vocab_size: int = 21
    op_vocab_size: int = 17
    attention_dim: int = 0  # 0 means "same as dec_hid_dim"
    g_state_choice: str = "previous"

    def __post_init__(self):
        for name in ("enc_emb_dim", "enc_hid_dim", "dec_emb_dim", "dec_hid_dim",
                     "pos_vocab_size", "op_vocab_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.attention_dim < 0:
            raise ValueError("attention_dim must be >= 1 (or 0 for the default)")
        if self.g_state_choice not in ("previous", "current"):
            raise ValueError(f"g_state_choice must be 'previous' or 'current', not {self.g_state_choice!r}")

    @property
    def att_dim(self) -> int:
        return self.attention_dim or self.dec_hid_dim

    @classmethod
    def preset(cls, name: str, **overrides) -> "ModelConfig":
        dims = MODEL_PRESETS[name]
        return replace(cls(**dims), **overrides)

    def to_dict(self) -> dict:
        return asdict(self)


# Published presets: (encoder emb, encoder hidden, decoder emb, decoder hidden)
MODEL_PRESETS = {
    "ex1": dict(enc_emb_dim=3, enc_hid_dim=3, dec_emb_dim=3, dec_hid_dim=3),
    "ex2": dict(enc_emb_dim=5, enc_hid_dim=10, dec_emb_dim=4, dec_hid_dim=12),
}


class ModelParams:
    """Ordered collection of named trainable tensors."""

    def __init__(self, tensors: dict[str, Tensor]):
        self._t = dict(tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self._t[name]

    def __contains__(self, name: str) -> bool:
        return name in self._t

    def __iter__(self) -> Iterator[str]:
        return iter(self._t)

    def __len__(self) -> int:
        return len(self._t)

    def items(self):
        return self._t.items()

    def tensors(self) -> list[Tensor]:
        return list(self._t.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self._t.items()}

    def copy(self) -> "ModelParams":
        return ModelParams({k: Tensor(v.data.copy(), requires_grad=v.requires_grad, name=k)
                            for k, v in self._t.items()})

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls({k: Tensor(v, requires_grad=True, name=k) for k, v in arrays.items()})

    def check_finite(self) -> None:
        for k, v in self._t.items():
            if not np.all(np.isfinite(v.data)):
                raise FloatingPointError(f"parameter {k} holds non-finite values")


def gru_shapes(prefix: str, n_in: int, n_hid: int) -> dict[str, tuple[int, int]]:
    out = {}
    for gate in "zrh":
        out[f"{prefix}.W_{gate}"] = (n_in, n_hid)
        out[f"{prefix}.U_{gate}"] = (n_hid, n_hid)
        out[f"{prefix}.b_{gate}"] = (1, n_hid)
    return out


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, int]]:
    shapes = {
        "E_pos": (cfg.pos_vocab_size, cfg.enc_emb_dim),
        "E_op": (cfg.op_vocab_size, cfg.dec_emb_dim),
    }
    shapes.update(gru_shapes("enc", cfg.enc_emb_dim, cfg.enc_hid_dim))
    shapes.update(gru_shapes("dec", cfg.dec_emb_dim + cfg.enc_hid_dim, cfg.dec_hid_dim))
    shapes.update({
        "W_s": (cfg.enc_hid_dim, cfg.dec_hid_dim),
        "v_a": (cfg.att_dim, 1),
        "W_a": (cfg.dec_hid_dim, cfg.att_dim),
        "U_a": (cfg.enc_hid_dim, cfg.att_dim),
        "W_op": (cfg.dec_emb_dim + cfg.enc_hid_dim + cfg.dec_hid_dim, cfg.op_vocab_size),
    })
    return shapes


def init_tensors(shapes: dict[str, tuple[int, int]], seed: int) -> ModelParams:
    """Uniform(-0.08, 0.08) weights and zero biases, in shape-table order."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in shapes.items():
        if name.split(".")[-1].startswith("b"):
            arr = np.zeros(shape)
        else:
            arr = rng.uniform(-INIT_SCALE, INIT_SCALE, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True, name=name)
    return ModelParams(tensors)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    return init_tensors(param_shapes(cfg), seed)


def check_shapes(params: ModelParams, shapes: dict[str, tuple[int, int]]) -> None:
    missing = set(shapes) - set(params)
    if missing:
        raise ad.DimensionError(f"missing parameters: {sorted(missing)}")
    for name, shape in shapes.items():
        if params[name].shape != shape:
            raise ad.DimensionError(f"parameter {name}: expected shape {shape}, got {params[name].shape}")


# ---------------------------------------------------------------- cells


def gru_cell(x: Tensor, h_prev: Tensor, params: ModelParams, prefix: str) -> Tensor:
    """One GRU step: h' = (1 - z) * h + z * tanh(x W_h + (r * h) U_h + b_h)."""
    p = lambda n: params[f"{prefix}.{n}"]  # noqa: E731
    if x.shape[1] != p("W_z").shape[0] or h_prev.shape[1] != p("U_z").shape[0]:
        raise ad.DimensionError(
            f"gru_cell {prefix}: input {x.shape} / state {h_prev.shape} do not fit "
            f"W {p('W_z').shape} / U {p('U_z').shape}"
        )
    z = ad.sigmoid(x @ p("W_z") + h_prev @ p("U_z") + p("b_z"))
    r = ad.sigmoid(x @ p("W_r") + h_prev @ p("U_r") + p("b_r"))
    h_tilde = ad.tanh(x @ p("W_h") + ad.mul(r, h_prev) @ p("U_h") + p("b_h"))
    return ad.mul(1.0 - z, h_prev) + ad.mul(z, h_tilde)


def encode(pos_ids, params: ModelParams) -> Tensor:
    """Run the encoder GRU from a zero state; row t of the result is h_t."""
    if len(pos_ids) == 0:
        raise ad.DomainError("cannot encode an empty sequence")
    hid = params["enc.U_z"].shape[0]
    h = ad.zeros(1, hid)
    states = []
    for tok in pos_ids:
        h = gru_cell(ad.embedding_lookup(params["E_pos"], int(tok)), h, params, "enc")
        states.append(h)
    return ad.stack_rows(states)


def attention_keys(H: Tensor, params: ModelParams) -> Tensor:
    return H @ params["U_a"]


def attend(s_prev: Tensor, H: Tensor, params: ModelParams, keys: Tensor | None = None
           ) -> tuple[Tensor, Tensor]:
    """Additive attention: alpha = softmax_j(v_a . tanh(W_a s + U_a h_j)), c = alpha H.

    ``keys`` may carry a precomputed ``H @ U_a`` to share across decoder steps.
    """
    if keys is None:
        keys = attention_keys(H, params)
    query = s_prev @ params["W_a"]
    T = H.shape[0]
    energy = ad.tanh(keys + ad.ones(T, 1) @ query)
    scores = ad.transpose(energy @ params["v_a"])
    alpha = ad.softmax(scores)
    return alpha @ H, alpha


def initial_state(H: Tensor, params: ModelParams) -> Tensor:
    last = ad.pick_row(H, H.shape[0] - 1)
    return ad.tanh(last @ params["W_s"])


def decode_step(y_prev_id: int, s_prev: Tensor, H: Tensor, params: ModelParams, cfg: ModelConfig,
                keys: Tensor | None = None) -> tuple[Tensor, Tensor, Tensor]:
    """One decoder step; returns (operator distribution, new state, attention weights)."""
    emb = ad.embedding_lookup(params["E_op"], int(y_prev_id))
    c, alpha = attend(s_prev, H, params, keys)
    s_new = gru_cell(ad.concat([emb, c]), s_prev, params, "dec")
    s_sel = s_prev if cfg.g_state_choice == "previous" else s_new
    logits = ad.concat([emb, c, s_sel]) @ params["W_op"]
    return ad.softmax(logits), s_new, alpha


def predict(pos_ids, params: ModelParams, cfg: ModelConfig, max_len: int = 20
            ) -> tuple[list[int], np.ndarray]:
    """Greedy decoding from SOS until EOS or ``max_len`` operators.

    Returns operator ids (EOS excluded) and the attention trace with one row
    per decoder step that was run.
    """
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    out: list[int] = []
    rows: list[np.ndarray] = []
    with ad.no_grad():
        H = encode(pos_ids, params)
        keys = attention_keys(H, params)
        s = initial_state(H, params)
        y = SOS_ID
        for _ in range(max_len):
            dist, s, alpha = decode_step(y, s, H, params, cfg, keys)
            rows.append(alpha.data[0].copy())
            scores = dist.data[0].copy()
            scores[[PAD_ID, SOS_ID]] = -np.inf
            y = int(np.argmax(scores))
            if y == EOS_ID:
                break
            out.append(y)
    return out, np.vstack(rows)
