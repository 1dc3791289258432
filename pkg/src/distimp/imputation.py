"""Draw M completions of the missing block for every incomplete subject."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, replace

import numpy as np

from .data import TrialDataset
from .mmrm import MmrmFit
from .sensitivity import LawBlock, SensitivityModel, law_blocks

DEFAULT_M = 100


def derive_seeds(*key, n: int = 2) -> tuple:
    """Independent integer seeds for the pipeline stages, all fixed by ``key``."""
    return tuple(int(s) for s in np.random.SeedSequence([int(k) for k in key]).generate_state(n))


def subject_key(subject_id) -> int:
    return int.from_bytes(hashlib.sha256(str(subject_id).encode()).digest()[:8], "little")


def subject_rng(seed: int, subject_id) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), subject_key(subject_id)]))


@dataclass(frozen=True, eq=False)
class ImputationSet:
    """Draws stored per law block: ``draws[b]`` has shape (n_b, M, d_b)."""

    M: int
    model: SensitivityModel
    theta_fingerprint: str
    seed: int
    blocks: tuple
    draws: tuple

    def draws_for(self, i: int) -> np.ndarray | None:
        """M x d_i matrix for subject row ``i``; None when the subject is complete."""
        for block, d in zip(self.blocks, self.draws):
            hit = np.flatnonzero(block.subjects == i)
            if hit.size:
                return d[hit[0]]
        return None

    def fingerprint(self) -> str:
        h = hashlib.sha256(f"{self.M}|{self.model.value}|{self.theta_fingerprint}|{self.seed}".encode())
        for block, d in zip(self.blocks, self.draws):
            h.update(np.ascontiguousarray(block.subjects).tobytes())
            h.update(np.ascontiguousarray(d).tobytes())
        return h.hexdigest()[:16]

    def with_draws(self, draws) -> "ImputationSet":
        return replace(self, draws=tuple(draws))

    def endpoint_draws(self, block_index: int) -> np.ndarray:
        """(n_b, M) draws of the final visit for one block."""
        return self.draws[block_index][:, :, -1]


def _draw_block(block: LawBlock, M: int, seed: int, ids) -> np.ndarray:
    L = block.chol
    z = np.stack([subject_rng(seed, ids[i]).standard_normal((M, block.dim)) for i in block.subjects])
    return block.mean[:, None, :] + z @ L.T


def impute(fit: MmrmFit, dataset: TrialDataset, model, M: int = DEFAULT_M, seed: int = 0) -> ImputationSet:
    if M < 1:
        raise ValueError("M must be at least 1")
    model = SensitivityModel.parse(model)
    blocks = tuple(law_blocks(fit, dataset, model))
    draws = tuple(_draw_block(b, M, seed, dataset.ids) for b in blocks)
    return ImputationSet(M, model, fit.fingerprint(), int(seed), blocks, draws)


def endpoint_matrix(iset: ImputationSet, dataset: TrialDataset) -> np.ndarray:
    """n x M matrix of final-visit values: observed y_T, or the m-th draw."""
    out = np.repeat(dataset.y[:, -1:], iset.M, axis=1)
    for b, block in enumerate(iset.blocks):
        out[block.subjects] = iset.endpoint_draws(b)
    return out


def completed_endpoint(iset: ImputationSet, dataset: TrialDataset, m: int) -> np.ndarray:
    """Final-visit value per subject in the m-th (1-based) completed dataset."""
    if not 1 <= m <= iset.M:
        raise IndexError(f"m={m} outside 1..{iset.M}")
    out = dataset.y[:, -1].copy()
    for b, block in enumerate(iset.blocks):
        out[block.subjects] = iset.endpoint_draws(b)[:, m - 1]
    return out


def completed_outcomes(iset: ImputationSet, dataset: TrialDataset, m: int) -> np.ndarray:
    """n x T outcomes of the m-th completed dataset.

    Visits a law does not cover (intermediate visits under RTB) stay NaN.
    """
    if not 1 <= m <= iset.M:
        raise IndexError(f"m={m} outside 1..{iset.M}")
    y = np.array(dataset.y)
    for block, d in zip(iset.blocks, iset.draws):
        y[block.subjects[:, None], block.visits] = d[:, m - 1, :]
    return y


def write_completed(iset: ImputationSet, dataset: TrialDataset, m: int, path):
    """CSV dump of the m-th completed dataset, with an ``imputed`` flag column."""
    y = completed_outcomes(iset, dataset, m)
    T = dataset.n_visits
    imputed = ~dataset.r[:, -1]
    header = ["id"] + [f"x{j + 1}" for j in range(dataset.n_covariates)] + ["group"]
    header += [f"y{k + 1}" for k in range(T)] + ["imputed"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(dataset.n_subjects):
            row = [dataset.ids[i]] + [repr(float(v)) for v in dataset.x[i]] + [int(dataset.group[i])]
            row += ["NA" if np.isnan(v) else repr(float(v)) for v in y[i]]
            row.append(int(imputed[i]))
            w.writerow(row)
