"""Synthetic multi-step arithmetic task: generator, tokenizer, batcher.

Problems are chains ``start op b1 op b2 ...`` with every intermediate value
kept inside a configured magnitude. The question presents the chain's
operations in a shuffled order, each tagged with its 1-based step index
(e.g. ``7;2+5;1*4;3-2`` = start at 7, apply ``*4`` then ``+5`` then ``-2``),
so answering directly requires content-addressed multi-hop lookup while the
trace simply linearizes the steps. Traces come in two styles: EQ renders
each step as ``<<a*b=c>>``; NL wraps the same step in one of eight fixed
sentence frames. The tokenizer is character-level over a closed vocabulary,
so round-tripping is the identity and answers can be checked by exact
string match.

Sequence layout (teacher): [bos] Q-chars C-chars A-chars [eos] where the
C segment ends with the literal scaffold ``ANS :`` so the colon is always
the token immediately before the first answer digit.
"""

from __future__ import annotations

import hashlib
import json
import re
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DataConfig",
    "Example",
    "TokenizedExample",
    "Batch",
    "Vocab",
    "VOCAB",
    "VocabError",
    "generate_example",
    "generate_split",
    "tokenize",
    "detokenize",
    "build_batch",
    "write_dataset",
    "read_dataset",
    "derive_seed",
]

OPS = ("+", "-", "*")
OP_WORDS = {"+": "plus", "-": "minus", "*": "times"}
ANSWER_SCAFFOLD = "ANS :"

# One frame per index; {a} {w} {b} {c} appear in this order in every frame so
# the self-check can re-parse the numbers positionally.
NL_FRAMES = (
    "{a} {w} {b} gives {c} .",
    "{a} {w} {b} is {c} .",
    "{a} {w} {b} makes {c} .",
    "{a} {w} {b} equals {c} .",
    "{a} {w} {b} yields {c} .",
    "{a} {w} {b} comes to {c} .",
    "{a} {w} {b} turns into {c} .",
    "{a} {w} {b} becomes {c} .",
)

SEG_SPECIAL, SEG_Q, SEG_C, SEG_A = 0, 1, 2, 3


def derive_seed(seed: int, purpose: str) -> int:
    """Stable sub-seed from (seed, purpose) via sha256."""
    digest = hashlib.sha256(f"{seed}/{purpose}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


class VocabError(ValueError):
    pass


class Vocab:
    """Closed character vocabulary plus the special tokens."""

    PAD, BOS, EOS, BOT, EOT, LATENT = 0, 1, 2, 3, 4, 5
    SPECIAL_NAMES = ["<pad>", "<bos>", "<eos>", "<bot>", "<eot>", "<latent>"]

    def __init__(self):
        chars = list("0123456789") + list("+-*=<>:;,. ") + list(
            "abcdefghijklmnopqrstuvwxyz"
        ) + list("ANS")
        self.id_to_token = list(self.SPECIAL_NAMES) + chars
        self.char_to_id = {c: i + len(self.SPECIAL_NAMES) for i, c in enumerate(chars)}
        self.size = len(self.id_to_token)

    def encode(self, text: str) -> list[int]:
        ids = []
        for pos, ch in enumerate(text):
            if ch not in self.char_to_id:
                raise VocabError(f"out-of-vocabulary character {ch!r} at position {pos}")
            ids.append(self.char_to_id[ch])
        return ids

    def decode(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i < len(self.SPECIAL_NAMES) or i >= self.size:
                raise VocabError(f"id {i} is not a plain character")
            out.append(self.id_to_token[i])
        return "".join(out)


VOCAB = Vocab()


@dataclass
class DataConfig:
    style: str = "eq"  # "eq" | "nl"
    steps: int = 3
    operand_lo: int = 2
    operand_hi: int = 9
    value_cap: int = 99
    train_n: int = 50000
    val_n: int = 500
    test_n: int = 1000
    max_len: int = 192
    seed: int = 0

    def validate(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.operand_hi < self.operand_lo:
            raise ValueError("empty operand range")
        if self.style not in ("eq", "nl"):
            raise ValueError(f"unknown style {self.style!r}")


@dataclass
class Example:
    question: str
    steps: list[str]
    answer: str
    style: str
    seed: int


@dataclass
class TokenizedExample:
    ids: list[int]
    segments: list[int]  # SEG_* label per token
    n_q: int
    n_c: int
    n_a: int
    distill_idx: int
    example: Example

    @property
    def length(self):
        return len(self.ids)


def _apply(a: int, op: str, b: int) -> int:
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    return a * b


def _feasible_ops(v: int, cfg: DataConfig) -> list[str]:
    ops = []
    if v + cfg.operand_lo <= cfg.value_cap:
        ops.append("+")
    if v - cfg.operand_lo >= 0:
        ops.append("-")
    if v * cfg.operand_lo <= cfg.value_cap:
        ops.append("*")
    return ops


def generate_example(seed: int, cfg: DataConfig) -> Example:
    """Deterministically build one k-step chain; self-checks by re-evaluation.

    The question lists the start value and the step-tagged operations in a
    shuffled order; the trace applies them by index. A direct answer
    therefore needs k content-addressed lookups, which is what the explicit
    (and latent) reasoning externalizes.
    """
    cfg.validate()
    rng = np.random.default_rng(derive_seed(cfg.seed, f"example/{seed}"))
    start = int(rng.integers(cfg.operand_lo, cfg.operand_hi + 1))
    value = start
    triples = []
    for _ in range(cfg.steps):
        op, operand, result = None, None, None
        for _ in range(50):  # resample on overflow past the configured magnitude
            cand_op = OPS[int(rng.integers(0, len(OPS)))]
            cand_b = int(rng.integers(cfg.operand_lo, cfg.operand_hi + 1))
            cand_v = _apply(value, cand_op, cand_b)
            if 0 <= cand_v <= cfg.value_cap:
                op, operand, result = cand_op, cand_b, cand_v
                break
        if op is None:
            feasible = _feasible_ops(value, cfg)
            op = feasible[int(rng.integers(0, len(feasible)))]
            lo, hi = cfg.operand_lo, cfg.operand_hi
            if op == "+":
                hi = min(hi, cfg.value_cap - value)
            elif op == "-":
                hi = min(hi, value)
            else:
                hi = min(hi, cfg.value_cap // max(value, 1))
            operand = int(rng.integers(lo, hi + 1))
            result = _apply(value, op, operand)
        triples.append((value, op, operand, result))
        value = result

    order = rng.permutation(cfg.steps)
    q_parts = [str(start)] + [
        f"{int(i) + 1}{triples[int(i)][1]}{triples[int(i)][2]}" for i in order
    ]
    if cfg.style == "eq":
        steps = [f"<<{a}{op}{b}={c}>>" for a, op, b, c in triples]
    else:
        frame_ids = rng.integers(0, len(NL_FRAMES), size=len(triples))
        steps = [
            NL_FRAMES[int(f)].format(a=a, w=OP_WORDS[op], b=b, c=c)
            for f, (a, op, b, c) in zip(frame_ids, triples)
        ]
    ex = Example(
        question=";".join(q_parts),
        steps=steps,
        answer=str(value),
        style=cfg.style,
        seed=seed,
    )
    assert verify_example(ex), f"generator self-check failed for seed {seed}"
    assert _question_consistent(ex), f"question/trace mismatch for seed {seed}"
    return ex


_EQ_STEP = re.compile(r"^<<(\d+)([+\-*])(\d+)=(\d+)>>$")
_NUMS = re.compile(r"\d+")


def _parse_step(step: str, style: str):
    if style == "eq":
        m = _EQ_STEP.match(step)
        if not m:
            return None
        a, op, b, c = m.group(1), m.group(2), m.group(3), m.group(4)
        return int(a), op, int(b), int(c)
    nums = _NUMS.findall(step)
    if len(nums) != 3:
        return None
    op = next((sym for sym, word in OP_WORDS.items() if f" {word} " in step), None)
    if op is None:
        return None
    return int(nums[0]), op, int(nums[1]), int(nums[2])


def verify_example(ex: Example) -> bool:
    """Independently re-evaluate the trace chain and compare with the answer."""
    prev = None
    for step in ex.steps:
        parsed = _parse_step(step, ex.style)
        if parsed is None:
            return False
        a, op, b, c = parsed
        if prev is not None and a != prev:
            return False
        if _apply(a, op, b) != c:
            return False
        prev = c
    return str(prev) == ex.answer


_Q_OP = re.compile(r"^(\d)([+\-*])(\d+)$")


def _question_consistent(ex: Example) -> bool:
    """Re-evaluate the shuffled question presentation against the answer."""
    parts = ex.question.split(";")
    value = int(parts[0])
    ops = {}
    for part in parts[1:]:
        m = _Q_OP.match(part)
        if not m:
            return False
        ops[int(m.group(1))] = (m.group(2), int(m.group(3)))
    for i in range(1, len(parts)):
        if i not in ops:
            return False
        op, b = ops[i]
        value = _apply(value, op, b)
    return str(value) == ex.answer


_SPLIT_OFFSETS = {"train": 0, "val": 10_000_000, "test": 20_000_000}
# question-hash buckets (out of 64) per split; combined with the seed offsets
# this makes the splits question-disjoint, so test accuracy measures
# generalization rather than recall of a seen chain
_SPLIT_BUCKETS = {
    "train": set(range(0, 52)),
    "val": set(range(52, 58)),
    "test": set(range(58, 64)),
}


def question_bucket(question: str) -> int:
    return hashlib.sha256(question.encode()).digest()[0] % 64


def generate_split(cfg: DataConfig, split: str) -> list[Example]:
    """Disjoint seed ranges plus question-disjoint hash buckets per split."""
    n = {"train": cfg.train_n, "val": cfg.val_n, "test": cfg.test_n}[split]
    base = _SPLIT_OFFSETS[split]
    buckets = _SPLIT_BUCKETS[split]
    out, seed = [], 0
    while len(out) < n:
        ex = generate_example(base + seed, cfg)
        seed += 1
        if question_bucket(ex.question) in buckets:
            out.append(ex)
    return out


def _render_trace(ex: Example, drop_last_step: bool) -> str:
    steps = ex.steps[:-1] if drop_last_step else ex.steps
    if not steps:
        raise ValueError(
            "drop-last-step left an empty trace; teacher cross-entropy needs N_C >= 1"
        )
    return " " + " ".join(steps) + " " + ANSWER_SCAFFOLD


def tokenize(obj, drop_last_step: bool = False):
    """Tokenize raw text (-> id list) or an Example (-> TokenizedExample)."""
    if isinstance(obj, str):
        return VOCAB.encode(obj)
    ex: Example = obj
    q_ids = VOCAB.encode(ex.question)
    c_ids = VOCAB.encode(_render_trace(ex, drop_last_step))
    a_ids = VOCAB.encode(ex.answer) + [Vocab.EOS]
    ids = [Vocab.BOS] + q_ids + c_ids + a_ids
    segments = (
        [SEG_SPECIAL] + [SEG_Q] * len(q_ids) + [SEG_C] * len(c_ids) + [SEG_A] * len(a_ids)
    )
    distill_idx = 1 + len(q_ids) + len(c_ids) - 1  # the ':' closing the scaffold
    assert VOCAB.id_to_token[ids[distill_idx]] == ":"
    return TokenizedExample(
        ids=ids,
        segments=segments,
        n_q=len(q_ids),
        n_c=len(c_ids),
        n_a=len(a_ids),
        distill_idx=distill_idx,
        example=ex,
    )


def detokenize(ids) -> str:
    return VOCAB.decode(ids)


@dataclass
class Batch:
    """Right-padded teacher view of a list of tokenized examples."""

    ids: np.ndarray  # [B, S] int32
    segments: np.ndarray  # [B, S] SEG_* labels, pads are SEG_SPECIAL
    pad_mask: np.ndarray  # [B, S] bool, True where real token
    n_q: np.ndarray
    n_c: np.ndarray
    n_a: np.ndarray
    distill_idx: np.ndarray  # [B]
    examples: list[Example]
    drop_last_step: bool
    dropped: int = 0  # examples discarded for exceeding max_len
    tokenized: list[TokenizedExample] = field(default_factory=list)

    @property
    def size(self):
        return self.ids.shape[0]

    @property
    def seq_len(self):
        return self.ids.shape[1]


def build_batch(examples: list[Example], drop_last_step: bool = False, max_len: int = 192) -> Batch:
    toks, dropped = [], 0
    for ex in examples:
        t = tokenize(ex, drop_last_step=drop_last_step)
        if t.length > max_len:
            dropped += 1
            continue
        toks.append(t)
    if not toks:
        raise ValueError("batch is empty after length filtering")
    s_max = max(t.length for t in toks)
    b = len(toks)
    ids = np.full((b, s_max), Vocab.PAD, dtype=np.int32)
    segments = np.full((b, s_max), SEG_SPECIAL, dtype=np.int8)
    pad_mask = np.zeros((b, s_max), dtype=bool)
    for i, t in enumerate(toks):
        ids[i, : t.length] = t.ids
        segments[i, : t.length] = t.segments
        pad_mask[i, : t.length] = True
    return Batch(
        ids=ids,
        segments=segments,
        pad_mask=pad_mask,
        n_q=np.array([t.n_q for t in toks]),
        n_c=np.array([t.n_c for t in toks]),
        n_a=np.array([t.n_a for t in toks]),
        distill_idx=np.array([t.distill_idx for t in toks]),
        examples=[t.example for t in toks],
        drop_last_step=drop_last_step,
        dropped=dropped,
        tokenized=toks,
    )


def write_dataset(path, examples: list[Example]):
    with open(path, "w") as f:
        for ex in examples:
            f.write(
                json.dumps(
                    {
                        "question": ex.question,
                        "steps": ex.steps,
                        "answer": ex.answer,
                        "style": ex.style,
                        "seed": ex.seed,
                    }
                )
                + "\n"
            )


def read_dataset(path) -> list[Example]:
    out = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            d = json.loads(line)
            out.append(Example(d["question"], list(d["steps"]), d["answer"], d["style"], d["seed"]))
    return out
