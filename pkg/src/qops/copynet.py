"""Copy/generate decoder over question words, conditioned on predicted operators.

Each decoder step t is conditioned on an aligned operator ``alsop_t`` taken
from a predicted operator sequence ``sop``. A small MLP over the previous
word embedding and the operator under the cursor chooses ``use_current``
(keep the cursor) or ``use_next`` (advance it by one, clamped at the end).

Training keeps everything differentiable: the operator embedding fed at a
step is the action-probability mix of the current and next operator
embeddings, while the cursor itself moves by the argmax action. Decoding
uses the hard choice for both.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from qops import autodiff as ad
from qops import checkpoint
from qops.autodiff import Tensor
from qops.data import EOS, EOS_ID, OPERATORS, PAD_ID, SOS_ID, UNK, UNK_ID, Vocab, tokenize
from qops.seq2seq import (
    ModelParams,
    attend,
    attention_keys,
    check_shapes,
    gru_cell,
    gru_shapes,
    init_tensors,
    initial_state,
)
from qops.training import AdamState, adam_step

USE_CURRENT, USE_NEXT = 0, 1
ACTIONS = ("use_current", "use_next")
SECTION = "CNET"
CONDITIONING = ("E_sop", "act.W1", "act.b1", "act.W2", "act.b2")


@dataclass(frozen=True)
class CopyNetConfig:
    word_vocab_size: int = 64
    op_vocab_size: int = len(OPERATORS) + 4
    emb_dim: int = 8
    enc_hid_dim: int = 8
    dec_hid_dim: int = 8
    attention_dim: int = 0
    sop_dim: int = 4
    action_hidden: int = 16

    @property
    def att_dim(self) -> int:
        return self.attention_dim or self.dec_hid_dim

    def to_dict(self) -> dict:
        return asdict(self)


def copynet_shapes(cfg: CopyNetConfig) -> dict[str, tuple[int, int]]:
    shapes = {"E_word": (cfg.word_vocab_size, cfg.emb_dim)}
    shapes.update(gru_shapes("enc", cfg.emb_dim, cfg.enc_hid_dim))
    shapes.update(gru_shapes("dec", cfg.emb_dim + cfg.enc_hid_dim, cfg.dec_hid_dim))
    shapes.update({
        "W_s": (cfg.enc_hid_dim, cfg.dec_hid_dim),
        "v_a": (cfg.att_dim, 1),
        "W_a": (cfg.dec_hid_dim, cfg.att_dim),
        "U_a": (cfg.enc_hid_dim, cfg.att_dim),
        "E_sop": (cfg.op_vocab_size, cfg.sop_dim),
        "W_gen": (cfg.dec_hid_dim + cfg.enc_hid_dim + cfg.sop_dim, cfg.word_vocab_size),
        "W_copy": (cfg.enc_hid_dim, cfg.dec_hid_dim + cfg.sop_dim),
        "act.W1": (cfg.emb_dim + cfg.sop_dim, cfg.action_hidden),
        "act.b1": (1, cfg.action_hidden),
        "act.W2": (cfg.action_hidden, 2),
        "act.b2": (1, 2),
    })
    return shapes


def init_copynet(cfg: CopyNetConfig, seed: int = 0) -> ModelParams:
    return init_tensors(copynet_shapes(cfg), seed)


def zero_conditioning(params: ModelParams) -> None:
    for name in CONDITIONING:
        params[name].data[...] = 0.0


# ---------------------------------------------------------------- data


@dataclass(frozen=True)
class CopyExample:
    id: str
    source: tuple[str, ...]
    target: tuple[str, ...]
    ops: tuple[str, ...]
    pos: tuple[str, ...] | None = None

    def to_json(self) -> dict:
        out = {"id": self.id, "question_tokens": list(self.source),
               "decomposition_tokens": list(self.target), "ops": list(self.ops)}
        if self.pos is not None:
            out["pos"] = list(self.pos)
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "CopyExample":
        pos = obj.get("pos")
        return cls(str(obj["id"]), tuple(obj["question_tokens"]), tuple(obj["decomposition_tokens"]),
                   tuple(obj["ops"]), tuple(pos) if pos is not None else None)


def from_break_record(rec: dict, pos: Sequence[str] | None = None) -> CopyExample:
    """Question tokens as source; steps joined by ';' as the target."""
    target: list[str] = []
    for i, step in enumerate(rec["steps"]):
        if i:
            target.append(";")
        target += [t for t in step.split() if t] if "#" in step else tokenize(step)
    return CopyExample(rec["id"], tuple(tokenize(rec["question"])), tuple(target), tuple(rec["ops"]),
                       tuple(pos) if pos is not None else None)


def read_copy_jsonl(path: str | Path) -> list[CopyExample]:
    with open(path, encoding="utf-8") as fh:
        return [CopyExample.from_json(json.loads(line)) for line in fh if line.strip()]


def write_copy_jsonl(examples: Iterable[CopyExample], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_json()) + "\n")
            n += 1
    return n


def build_word_vocab(corpus: Sequence[CopyExample], max_size: int = 200) -> Vocab:
    """Most frequent source/target words (ties by first occurrence), capped."""
    counts: Counter = Counter()
    for ex in corpus:
        counts.update(ex.source)
        counts.update(ex.target)
    ranked = sorted(counts, key=lambda w: -counts[w])  # stable: ties keep first occurrence
    return Vocab(ranked[: max(0, max_size - 4)])


# ---------------------------------------------------------------- alignment


@dataclass(frozen=True)
class AlignmentState:
    cursor: int
    alsop: int

    @classmethod
    def start(cls, sop: Sequence[int]) -> "AlignmentState":
        if not sop:
            raise ad.DomainError("operator sequence is empty")
        return cls(0, int(sop[0]))


def advance_alignment(state: AlignmentState, action: int, sop: Sequence[int]) -> AlignmentState:
    """``use_current`` keeps the cursor; ``use_next`` moves it one step, clamped."""
    if not sop:
        raise ad.DomainError("operator sequence is empty")
    if not 0 <= state.cursor < len(sop):
        raise ad.DomainError(f"cursor {state.cursor} outside operator sequence of length {len(sop)}")
    cursor = state.cursor
    if action == USE_NEXT:
        cursor = min(cursor + 1, len(sop) - 1)
    elif action != USE_CURRENT:
        raise ValueError(f"unknown action {action!r}")
    return AlignmentState(cursor, int(sop[cursor]))


def align_action(y_prev_emb: Tensor, sop_id: int, params: ModelParams) -> Tensor:
    """softmax(MLP(y_{t-1}, sop_{t'})) over (use_current, use_next)."""
    sop_emb = ad.embedding_lookup(params["E_sop"], int(sop_id))
    hidden = ad.tanh(ad.concat([y_prev_emb, sop_emb]) @ params["act.W1"] + params["act.b1"])
    return ad.softmax(hidden @ params["act.W2"] + params["act.b2"])


# ---------------------------------------------------------------- mixture


@dataclass
class MixtureDist:
    """Softmax over generate scores (vocab) followed by copy scores (source positions)."""

    probs: Tensor  # 1 x (V + T_src)
    vocab: Vocab
    source: tuple[str, ...]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def word_prob(self, word: str) -> Tensor:
        """Generate mass of ``word`` (UNK if not generable and not copyable) plus its copy mass."""
        V = self.vocab_size
        terms = [ad.pick(self.probs, 0, V + j) for j, w in enumerate(self.source) if w == word]
        if word in self.vocab:
            terms.insert(0, ad.pick(self.probs, 0, self.vocab.id(word)))
        elif not terms:
            terms.append(ad.pick(self.probs, 0, UNK_ID))
        return ad.sum_all(terms)

    def collapsed(self) -> dict[str, float]:
        """Word-level probabilities with copy mass merged across repeated source tokens."""
        p = self.probs.data[0]
        V = self.vocab_size
        out = {w: float(p[i]) for i, w in enumerate(self.vocab.symbols)}
        for j, w in enumerate(self.source):
            out[w] = out.get(w, 0.0) + float(p[V + j])
        return out


def copy_gen_dist(s_t: Tensor, c_t: Tensor, H: Tensor, alsop_emb: Tensor | None, params: ModelParams,
                  vocab: Vocab, source: Sequence[str], copy_keys: Tensor | None = None) -> MixtureDist:
    """Generate scores W_gen [s; c; e_op] and copy scores tanh(h_j W_copy) . [s; e_op].

    ``alsop_emb=None`` drops the operator conditioning and uses only the
    state/context slices of the heads (the unconditioned decoder).
    """
    if H.shape[0] == 0 or not source:
        raise ad.DomainError("copy distribution needs a non-empty source")
    dec_hid = s_t.shape[1]
    if alsop_emb is None:
        gen = ad.concat([s_t, c_t]) @ _rows(params["W_gen"], dec_hid + c_t.shape[1])
        keys = ad.tanh(H @ _cols(params["W_copy"], dec_hid))
        copy = s_t @ ad.transpose(keys)
    else:
        gen = ad.concat([s_t, c_t, alsop_emb]) @ params["W_gen"]
        keys = copy_keys if copy_keys is not None else ad.tanh(H @ params["W_copy"])
        copy = ad.concat([s_t, alsop_emb]) @ ad.transpose(keys)
    return MixtureDist(ad.softmax(ad.concat([gen, copy])), vocab, tuple(source))


def _rows(m: Tensor, n: int) -> Tensor:
    """First ``n`` rows of ``m`` as a differentiable slice."""
    sel = np.zeros((n, m.shape[0]))
    sel[np.arange(n), np.arange(n)] = 1.0
    return Tensor(sel) @ m


def _cols(m: Tensor, n: int) -> Tensor:
    sel = np.zeros((m.shape[1], n))
    sel[np.arange(n), np.arange(n)] = 1.0
    return m @ Tensor(sel)


# ---------------------------------------------------------------- decoding


@dataclass
class DecodeTrace:
    words: list[str] = field(default_factory=list)
    cursors: list[int] = field(default_factory=list)
    actions: list[int] = field(default_factory=list)


def _encode_source(source: Sequence[str], vocab: Vocab, params: ModelParams) -> Tensor:
    hid = params["enc.U_z"].shape[0]
    h = ad.zeros(1, hid)
    states = []
    for w in source:
        h = gru_cell(ad.embedding_lookup(params["E_word"], vocab.id(w)), h, params, "enc")
        states.append(h)
    return ad.stack_rows(states)


def example_log_likelihood(ex: CopyExample, sop: Sequence[int] | None, params: ModelParams, vocab: Vocab,
                           trace: DecodeTrace | None = None) -> Tensor:
    """Teacher-forced sum over t of log p(y_t | y_<t, X, alsop); ``sop=None`` is unconditioned."""
    if not ex.source:
        raise ad.DomainError(f"example {ex.id}: empty source")
    H = _encode_source(ex.source, vocab, params)
    keys = attention_keys(H, params)
    s = initial_state(H, params)
    conditioned = sop is not None
    if conditioned:
        state = AlignmentState.start(sop)
        alsop_emb = ad.embedding_lookup(params["E_sop"], state.alsop)
        copy_keys = ad.tanh(H @ params["W_copy"])
    targets = list(ex.target) + [EOS]
    prev_id = SOS_ID
    terms = []
    for t, word in enumerate(targets):
        y_emb = ad.embedding_lookup(params["E_word"], prev_id)
        if conditioned and t > 0:
            pi = align_action(y_emb, state.alsop, params)
            nxt = min(state.cursor + 1, len(sop) - 1)
            pair = ad.stack_rows([ad.embedding_lookup(params["E_sop"], state.alsop),
                                  ad.embedding_lookup(params["E_sop"], int(sop[nxt]))])
            alsop_emb = pi @ pair
            action = int(np.argmax(pi.data[0]))
            state = advance_alignment(state, action, sop)
            if trace is not None:
                trace.actions.append(action)
        if conditioned and trace is not None:
            trace.cursors.append(state.cursor)
        c, _ = attend(s, H, params, keys)
        s = gru_cell(ad.concat([y_emb, c]), s, params, "dec")
        dist = copy_gen_dist(s, c, H, alsop_emb if conditioned else None, params, vocab, ex.source,
                             copy_keys if conditioned else None)
        terms.append(ad.log(dist.word_prob(word)))
        prev_id = vocab.id(word)
    return ad.sum_all(terms)


def enhanced_loss(batch: Sequence[CopyExample], sop_sequences: Sequence[Sequence[int]] | None,
                  params: ModelParams, vocab: Vocab) -> Tensor:
    """-(1/N) sum_k sum_t log p(y_t^k | y_<t^k, X^k, alsop_<t^k).

    With ``sop_sequences=None`` the same loss is computed without operator
    conditioning.
    """
    if not batch:
        raise ad.DomainError("empty batch")
    terms = []
    for k, ex in enumerate(batch):
        sop = None if sop_sequences is None else sop_sequences[k]
        terms.append(example_log_likelihood(ex, sop, params, vocab))
    return ad.scale(ad.sum_all(terms), -1.0 / len(batch))


def greedy_decode(source: Sequence[str], sop: Sequence[int], params: ModelParams, vocab: Vocab,
                  max_len: int = 30) -> DecodeTrace:
    """Decode words with hard alignment actions until EOS or ``max_len``."""
    trace = DecodeTrace()
    with ad.no_grad():
        H = _encode_source(source, vocab, params)
        keys = attention_keys(H, params)
        copy_keys = ad.tanh(H @ params["W_copy"])
        s = initial_state(H, params)
        state = AlignmentState.start(sop)
        prev_id = SOS_ID
        for t in range(max_len):
            y_emb = ad.embedding_lookup(params["E_word"], prev_id)
            if t > 0:
                action = int(np.argmax(align_action(y_emb, state.alsop, params).data[0]))
                state = advance_alignment(state, action, sop)
                trace.actions.append(action)
            trace.cursors.append(state.cursor)
            c, _ = attend(s, H, params, keys)
            s = gru_cell(ad.concat([y_emb, c]), s, params, "dec")
            alsop_emb = ad.embedding_lookup(params["E_sop"], state.alsop)
            probs = copy_gen_dist(s, c, H, alsop_emb, params, vocab, source, copy_keys).collapsed()
            for banned in (vocab.symbol(PAD_ID), vocab.symbol(SOS_ID)):
                probs.pop(banned, None)
            word = max(probs, key=probs.get)
            if word == EOS:
                break
            trace.words.append(word)
            prev_id = vocab.id(word)
    return trace


# ---------------------------------------------------------------- training


@dataclass
class CopyNetModel:
    config: CopyNetConfig
    params: ModelParams
    vocab: Vocab
    op_vocab: Vocab


def gold_sop(examples: Sequence[CopyExample], op_vocab: Vocab) -> list[list[int]]:
    return [op_vocab.encode(ex.ops) for ex in examples]


def predicted_sop(examples: Sequence[CopyExample], predictor, op_vocab: Vocab, tagger=None) -> list[list[int]]:
    """Run a frozen operator predictor on each question's POS tags.

    ``predictor`` is a :class:`qops.training.Seq2SeqModel`. An empty
    prediction becomes ``[UNK]`` so the alignment cursor has a target.
    """
    out = []
    for ex in examples:
        pos = ex.pos
        if pos is None:
            if tagger is None:
                raise ValueError(f"example {ex.id} has no POS tags and no tagger was given")
            pos = tuple(tagger.tag(w) for w in ex.source)
        ops, _ = predictor.predict_symbols(pos)
        out.append(op_vocab.encode(ops) or [UNK_ID])
    return out


def train_copynet(corpus: Sequence[CopyExample], sop: Sequence[Sequence[int]], cfg: CopyNetConfig | None = None,
                  epochs: int = 30, lr: float = 1e-2, batch_size: int = 4, seed: int = 0,
                  vocab: Vocab | None = None, op_vocab: Vocab | None = None,
                  on_epoch: Callable[[int, float], None] | None = None) -> tuple[CopyNetModel, list[float]]:
    """Fit the decoder and alignment MLP by Adam on the enhanced loss with frozen operator sequences."""
    vocab = vocab or build_word_vocab(corpus)
    op_vocab = op_vocab or Vocab(OPERATORS)
    cfg = replace(cfg or CopyNetConfig(), word_vocab_size=len(vocab), op_vocab_size=len(op_vocab))
    params = init_copynet(cfg, seed)
    tensors = params.tensors()
    state = AdamState.for_params(tensors)
    rng = np.random.default_rng(seed)
    losses = []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        total, n = 0.0, 0
        for k in range(0, len(order), batch_size):
            idx = order[k : k + batch_size]
            ad.zero_grad(tensors)
            loss = enhanced_loss([corpus[i] for i in idx], [sop[i] for i in idx], params, vocab)
            if not math.isfinite(loss.item()):
                raise FloatingPointError(f"non-finite copy loss at epoch {epoch}")
            ad.backward(loss)
            adam_step(tensors, state, lr)
            total += loss.item()
            n += 1
        losses.append(total / n)
        if on_epoch is not None:
            on_epoch(epoch, losses[-1])
    ad.zero_grad(tensors)
    return CopyNetModel(cfg, params, vocab, op_vocab), losses


def evaluate_copynet(model: CopyNetModel, corpus: Sequence[CopyExample], sop: Sequence[Sequence[int]],
                     max_len: int = 30) -> dict:
    hits = total = exact = 0
    monotone = True
    for ex, ops in zip(corpus, sop):
        trace = greedy_decode(ex.source, ops, model.params, model.vocab, max_len)
        gold = list(ex.target)
        hits += sum(1 for p, g in zip(trace.words, gold) if p == g)
        total += len(gold)
        exact += int(trace.words == gold)
        steps = np.diff(trace.cursors)
        monotone &= bool(np.all((steps == 0) | (steps == 1)))
    return {"n_examples": len(corpus), "token_accuracy": hits / total if total else 0.0,
            "exact_match": exact / len(corpus) if corpus else 0.0, "cursor_monotone": monotone}


def save_copynet(model: CopyNetModel, path: str | Path) -> None:
    cfg = {f"model.{k}": str(v) for k, v in model.config.to_dict().items()}
    cfg["word_vocab"] = json.dumps(model.vocab.symbols)
    cfg["op_vocab"] = json.dumps(model.op_vocab.symbols)
    checkpoint.save(path, SECTION, cfg, model.params.arrays())


def load_copynet(path: str | Path) -> CopyNetModel:
    _, cfg, arrays = checkpoint.load(path, SECTION)
    try:
        mcfg = CopyNetConfig(**{k[6:]: int(v) for k, v in cfg.items() if k.startswith("model.")})
        vocab = Vocab.from_symbols(json.loads(cfg["word_vocab"]))
        op_vocab = Vocab.from_symbols(json.loads(cfg["op_vocab"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise checkpoint.FormatError(f"{path}: bad config block ({exc})") from exc
    params = ModelParams.from_arrays(arrays)
    check_shapes(params, copynet_shapes(mcfg))
    return CopyNetModel(mcfg, params, vocab, op_vocab)
