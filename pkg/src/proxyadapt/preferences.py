"""Bradley-Terry preference data from a data-generating process ``(r, pi_ref, p_X)``."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from proxyadapt.errors import InvalidInputError
from proxyadapt.policy import RewardTable, as_table


@dataclass(frozen=True)
class DataProcess:
    reward: RewardTable
    pi_ref: np.ndarray
    prompt_dist: np.ndarray

    def __post_init__(self):
        ref = as_table(self.pi_ref)
        pd = np.asarray(self.prompt_dist, dtype=float)
        if ref.shape != self.reward.values.shape:
            raise InvalidInputError("reward and pi_ref must share a shape")
        if pd.shape != (ref.shape[0],) or np.any(pd < 0) or abs(pd.sum() - 1.0) > 1e-12:
            raise InvalidInputError("prompt_dist must be a distribution over X")
        object.__setattr__(self, "pi_ref", ref)
        object.__setattr__(self, "prompt_dist", pd)

    @property
    def beta(self) -> float:
        return self.reward.beta

    @property
    def shape(self) -> tuple[int, int]:
        return self.pi_ref.shape


@dataclass
class PreferenceDataset:
    """Triples ``(x, y_w, y_l)`` stored column-wise."""

    prompts: np.ndarray
    winners: np.ndarray
    losers: np.ndarray
    n_prompts: int
    n_responses: int
    source: str = "true"
    seed: int | None = None
    beta: float | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.prompts.shape[0])

    def __iter__(self):
        return zip(self.prompts.tolist(), self.winners.tolist(), self.losers.tolist())

    def head(self, n: int) -> "PreferenceDataset":
        """The first ``n`` triples (datasets of growing size share prefixes)."""
        return PreferenceDataset(self.prompts[:n], self.winners[:n], self.losers[:n],
                                 self.n_prompts, self.n_responses, self.source, self.seed,
                                 self.beta, dict(self.meta))

    def pair_weights(self) -> np.ndarray:
        """Empirical measure as an ``|X| x |Y| x |Y|`` array indexed ``[x, y_w, y_l]``."""
        W = np.zeros((self.n_prompts, self.n_responses, self.n_responses))
        if len(self) == 0:
            return W
        np.add.at(W, (self.prompts, self.winners, self.losers), 1.0)
        return W / len(self)


def make_rng(seed) -> np.random.Generator:
    """PCG64 stream; accepts an int or a tuple of ints (hashed by SeedSequence)."""
    if isinstance(seed, np.random.Generator):
        return seed
    if isinstance(seed, (tuple, list)):
        return np.random.Generator(np.random.PCG64(np.random.SeedSequence(list(seed))))
    return np.random.Generator(np.random.PCG64(seed))


def _sample_rows(rng: np.random.Generator, probs: np.ndarray, rows: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=1)
    cdf[:, -1] = 1.0
    u = rng.random(rows.shape[0])
    return (u[:, None] >= cdf[rows]).sum(axis=1)


def sample_preferences(G: DataProcess, n: int, seed, source: str = "true") -> PreferenceDataset:
    """Draw ``n`` Bradley-Terry labelled comparisons.

    Per triple: ``x ~ p_X``, ``y1, y2 ~ pi_ref(.|x)`` i.i.d., and ``y1`` wins with
    probability ``sigmoid(r(x,y1) - r(x,y2))``. Ties (``y1 == y2``) are kept.
    """
    if n < 0:
        raise InvalidInputError("n must be non-negative")
    rng = make_rng(seed)
    nx, ny = G.shape
    pcdf = np.cumsum(G.prompt_dist)
    pcdf[-1] = 1.0
    x = np.searchsorted(pcdf, rng.random(n), side="right").astype(np.int64)
    y1 = _sample_rows(rng, G.pi_ref, x)
    y2 = _sample_rows(rng, G.pi_ref, x)
    r = G.reward.values
    b = rng.random(n) < expit(r[x, y1] - r[x, y2])
    yw = np.where(b, y1, y2).astype(np.int64)
    yl = np.where(b, y2, y1).astype(np.int64)
    return PreferenceDataset(x, yw, yl, nx, ny, source, seed if isinstance(seed, int) else None, G.beta)


def population_win_prob(G: DataProcess, x: int, y1: int, y2: int) -> float:
    r = G.reward.values
    return float(expit(r[x, y1] - r[x, y2]))


def population_pair_weights(G: DataProcess) -> np.ndarray:
    """Exact probability of observing the ordered triple ``(x, y_w, y_l)``.

    ``(w, l)`` arises from ``(y1, y2) = (w, l)`` with ``y1`` winning or from
    ``(l, w)`` with ``y2`` winning, hence ``2 p(x) pi(w) pi(l) sigmoid(r_w - r_l)``.
    """
    r = G.reward.values
    ref = G.pi_ref
    pref = expit(r[:, :, None] - r[:, None, :])
    return 2.0 * G.prompt_dist[:, None, None] * ref[:, :, None] * ref[:, None, :] * pref


def write_jsonl(ds: PreferenceDataset, path) -> None:
    path = Path(path)
    header = {"source": ds.source, "seed": ds.seed, "n_prompts": ds.n_prompts,
              "n_responses": ds.n_responses, "beta": ds.beta}
    with path.open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for x, w, l in ds:
            fh.write(json.dumps({"x": x, "yw": w, "yl": l}) + "\n")


def read_jsonl(path) -> PreferenceDataset:
    with Path(path).open() as fh:
        header = json.loads(fh.readline())
        rows = [json.loads(line) for line in fh if line.strip()]
    arr = np.array([[r["x"], r["yw"], r["yl"]] for r in rows], dtype=np.int64).reshape(-1, 3)
    return PreferenceDataset(arr[:, 0], arr[:, 1], arr[:, 2], header["n_prompts"],
                             header["n_responses"], header["source"], header["seed"], header["beta"])
