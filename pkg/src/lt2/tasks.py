"""State-based recall programs: generation, an independent interpreter,
character tokenization and the curriculum controller.

A program writes a bit array, binds five variables ``a..e`` to distinct
indices, then performs ``n`` variable swaps, each followed by
``assert bits[a] == ?``. The answer at every ``?`` is the bit currently
pointed to by ``a``.
"""
from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ContractError, ParseError, TokenizerError

VARS = "abcde"
PAIRS = tuple(combinations(VARS, 2))
STAGES = (8, 16, 32, 64, 128, 256)


@dataclass
class RecallProgram:
    m: int
    n: int
    seed: int | None
    bits: list[int]
    bindings: list[int]
    swaps: list[tuple[str, str]]
    targets: list[int]
    text: str

    def to_json(self) -> str:
        return json.dumps({"m": self.m, "n": self.n, "seed": self.seed, "text": self.text,
                           "targets": self.targets})


def render(bits: Sequence[int], bindings: Sequence[int], swaps: Sequence[tuple[str, str]]) -> str:
    lines = ["bits = [" + ",".join(str(int(b)) for b in bits) + "]",
             "a, b, c, d, e = " + ", ".join(str(int(i)) for i in bindings)]
    for x, y in swaps:
        lines.append(f"{x}, {y} = {y}, {x};")
        lines.append("assert bits[a] == ?")
    return "\n".join(lines)


def _simulate(bits, bindings, swaps) -> list[int]:
    ptr = dict(zip(VARS, bindings))
    out = []
    for x, y in swaps:
        ptr[x], ptr[y] = ptr[y], ptr[x]
        out.append(int(bits[ptr["a"]]))
    return out


def make_program(bits, bindings, swaps, seed=None) -> RecallProgram:
    bits = [int(b) for b in bits]
    bindings = [int(i) for i in bindings]
    swaps = [tuple(s) for s in swaps]
    m = len(bits)
    if len(bindings) != 5 or len(set(bindings)) != 5:
        raise ContractError("need five distinct bindings")
    if any(not 0 <= i < m for i in bindings):
        raise ContractError("binding outside the bit array")
    return RecallProgram(m, len(swaps), seed, bits, bindings, swaps,
                         _simulate(bits, bindings, swaps), render(bits, bindings, swaps))


def gen_state_recall(m: int, n: int, seed: int) -> RecallProgram:
    if m < 5:
        raise ContractError(f"m={m}: need at least 5 positions for the five variables")
    if n < 0:
        raise ContractError("n must be >= 0")
    rng = np.random.default_rng(seed)
    bits = rng.integers(0, 2, size=m)
    bindings = rng.choice(m, size=5, replace=False)
    swaps = [PAIRS[i] for i in rng.integers(0, len(PAIRS), size=n)]
    return make_program(bits, bindings, swaps, seed=seed)


def example_program() -> RecallProgram:
    """The m=32, n=8 worked example; its final answer is 0."""
    bits = [1, 0, 1, 1, 0, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0, 1, 0, 1, 1, 0, 1, 0, 1, 1, 0, 0, 1, 0]
    swaps = [("a", "c"), ("b", "d"), ("a", "e"), ("c", "d"), ("d", "e"), ("a", "b"), ("b", "c"), ("a", "d")]
    return make_program(bits, [11, 27, 4, 19, 30], swaps)


# -- interpreter -----------------------------------------------------------------------------
_BITS = re.compile(r"bits = \[((?:[01](?:,[01])*)?)\]")
_BIND = re.compile(r"a, b, c, d, e = (\d+), (\d+), (\d+), (\d+), (\d+)")
_SWAP = re.compile(r"([a-e]), ([a-e]) = ([a-e]), ([a-e]);")
_ASSERT = re.compile(r"assert bits\[([a-e])\] == \?")


def interpret_program(text: str) -> list[int]:
    """Execute a program's text and return the answer at each ``?``."""
    bits = None
    env: dict[str, int] | None = None
    answers = []
    for no, line in enumerate(text.split("\n"), 1):
        if (mt := _BITS.fullmatch(line)) is not None:
            if bits is not None:
                raise ParseError("bits assigned twice", no)
            bits = [int(c) for c in mt.group(1).split(",")] if mt.group(1) else []
        elif (mt := _BIND.fullmatch(line)) is not None:
            if bits is None:
                raise ParseError("bindings before bits", no)
            idx = [int(g) for g in mt.groups()]
            if any(i >= len(bits) for i in idx):
                raise ParseError("binding index out of range", no)
            env = dict(zip("abcde", idx))
        elif (mt := _SWAP.fullmatch(line)) is not None:
            x, y, y2, x2 = mt.groups()
            if env is None:
                raise ParseError("swap before bindings", no)
            if x == y or x2 != x or y2 != y:
                raise ParseError(f"not a swap: {line!r}", no)
            env[x], env[y] = env[y], env[x]
        elif (mt := _ASSERT.fullmatch(line)) is not None:
            if env is None:
                raise ParseError("assert before bindings", no)
            answers.append(bits[env[mt.group(1)]])
        else:
            raise ParseError(f"unrecognised line {line!r}", no)
    return answers


# -- tokenizer ------------------------------------------------------------------------------------
SPECIALS = ("<pad>", "<bos>", "<eos>")
CHARS = "\n ,;=?[]" + "0123456789" + "abcdeirst"


class CharTokenizer:
    def __init__(self):
        self.itos = list(SPECIALS) + list(CHARS)
        self.stoi = {s: i for i, s in enumerate(self.itos)}
        self.pad, self.bos, self.eos = 0, 1, 2
        self.query = self.stoi["?"]
        self.bit_ids = (self.stoi["0"], self.stoi["1"])

    @property
    def vocab_size(self) -> int:
        return len(self.itos)

    def encode(self, text: str) -> np.ndarray:
        try:
            return np.array([self.bos] + [self.stoi[c] for c in text], dtype=np.int64)
        except KeyError as e:
            raise TokenizerError(f"character {e.args[0]!r} is not in the vocabulary") from None

    def decode(self, ids) -> str:
        return "".join(self.itos[int(i)] for i in ids if int(i) >= len(SPECIALS))


TOKENIZER = CharTokenizer()


@dataclass
class TokenizedProgram:
    ids: np.ndarray
    loss_mask: np.ndarray
    targets: np.ndarray


def tokenize_program(program: RecallProgram | str, targets: Sequence[int] | None = None,
                     tok: CharTokenizer = TOKENIZER) -> TokenizedProgram:
    """Character ids with a leading ``<bos>``; the loss mask marks each ``?``.

    ``targets[j]`` holds the token id of the answer digit at masked positions
    and ``<pad>`` elsewhere.
    """
    if isinstance(program, RecallProgram):
        text, answers = program.text, program.targets
    else:
        text = program
        answers = list(targets) if targets is not None else interpret_program(text)
    ids = tok.encode(text)
    mask = ids == tok.query
    if int(mask.sum()) != len(answers):
        raise ContractError(f"{int(mask.sum())} query tokens but {len(answers)} answers")
    tg = np.full(ids.shape, tok.pad, dtype=np.int64)
    tg[mask] = [tok.bit_ids[a] for a in answers]
    return TokenizedProgram(ids, mask, tg)


def detokenize(ids, tok: CharTokenizer = TOKENIZER) -> str:
    return tok.decode(ids)


def collate(items: Sequence[TokenizedProgram], pad: int = 0):
    """Right-pad to a batch: ``(ids, mask, targets)`` each ``(B, L_max)``."""
    L = max(t.ids.size for t in items)
    B = len(items)
    ids = np.full((B, L), pad, dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    tg = np.full((B, L), pad, dtype=np.int64)
    for b, t in enumerate(items):
        n = t.ids.size
        ids[b, :n], mask[b, :n], tg[b, :n] = t.ids, t.loss_mask, t.targets
    return ids, mask, tg


# -- curriculum --------------------------------------------------------------------------------------
EVAL_SEED_BASE = 1 << 40


def eval_seeds(n: int, count: int = 512) -> range:
    """Held-out seeds for stage size ``n``; disjoint from training seeds (< 2**40)."""
    start = EVAL_SEED_BASE + n * (1 << 20)
    return range(start, start + count)


def train_seed(rng: np.random.Generator) -> int:
    return int(rng.integers(0, EVAL_SEED_BASE))


@dataclass
class CurriculumState:
    stage: int = 0
    steps_used: int = 0
    threshold: float = 0.90
    budget: int = 100_000
    stages: tuple[int, ...] = STAGES
    solved: list[int] = field(default_factory=list)
    exhausted: bool = False

    @property
    def n(self) -> int:
        return self.stages[min(self.stage, len(self.stages) - 1)]

    @property
    def finished(self) -> bool:
        return self.exhausted or self.stage >= len(self.stages)

    @property
    def n_max(self) -> int | None:
        return max(self.solved) if self.solved else None


def curriculum_step(state: CurriculumState, eval_accuracy: float, steps: int = 0) -> CurriculumState:
    """Advance when ``eval_accuracy >= threshold``; otherwise charge ``steps`` to the budget."""
    if not 0.0 <= eval_accuracy <= 1.0:
        raise ContractError(f"accuracy {eval_accuracy} outside [0, 1]")
    if state.finished:
        return state
    if eval_accuracy >= state.threshold:
        return replace(state, stage=state.stage + 1, steps_used=0,
                       solved=state.solved + [state.stages[state.stage]])
    used = state.steps_used + steps
    return replace(state, steps_used=used, exhausted=used >= state.budget)


# -- corpora ----------------------------------------------------------------------------------------
def write_corpus(programs: Iterable[RecallProgram], path) -> int:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("w") as f:
        for p in programs:
            f.write(p.to_json() + "\n")
            n += 1
    return n


def read_corpus(path) -> list[dict]:
    with Path(path).open() as f:
        return [json.loads(line) for line in f if line.strip()]
