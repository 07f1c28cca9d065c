"""
Reproducible generators for the experiment families:

    poisson               phi from the 2-D discrete Laplacian, A_minus = A_plus = -I
    random-qbd            sub-stochastic quasi-birth-death blocks with rank-1
                          off-diagonal structure
    convection-diffusion  generalized Sylvester problem on the unit square

All randomness goes through numpy's PCG64 generator seeded explicitly, so
identical seeds give bit-identical problems on every platform.

Usage:
    spec = load_spec("specs/poisson.yaml")
    phi = build(spec)
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Literal, Union

import numpy as np
import scipy.sparse
import yaml
from pydantic import BaseModel, Field, model_validator

import sylvester
from cyclic_reduction import LaurentTriple
from decay_bounds import SpectralSplit, spectral_split
from errors import GenerationFailure, NoSplitting
from qcr_solver import BlockTridToeplitzSystem

logger = logging.getLogger(__name__)

DEFAULT_SEED = 0xC0FFEE
ROW_SUM = 1 - 1e-3
SPLIT_MARGIN = 1e-3
MAX_ATTEMPTS = 100


class ProblemSpec(BaseModel):
    kind: Literal["poisson", "random-qbd", "convection-diffusion"]
    m: int = Field(..., ge=1)
    n: int = Field(1, ge=1)
    seed: int = Field(DEFAULT_SEED, ge=0, lt=2 ** 64)
    params: Dict[str, Any] = Field(default_factory=dict)

    @model_validator(mode="after")
    def _sizes(self):
        if self.kind in ("poisson", "random-qbd") and self.m < 2:
            raise ValueError(f"{self.kind} needs m >= 2")
        if self.kind == "convection-diffusion" and self.m < 3:
            raise ValueError("convection-diffusion needs m >= 3")
        return self


def rng_for(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


def laplacian_1d(m: int, diagonal: float = 4.0) -> np.ndarray:
    """trid_m(-1, diagonal, -1)."""
    return scipy.sparse.diags([-1.0, diagonal, -1.0], [-1, 0, 1], shape=(m, m)).toarray()


def poisson(m: int) -> LaurentTriple:
    if m < 2:
        raise ValueError(f"poisson blocks need m >= 2, got {m}")
    eye = np.eye(m)
    return LaurentTriple(-eye, laplacian_1d(m), -eye)


def poisson_system(n: int, m: int, seed: int = DEFAULT_SEED) -> BlockTridToeplitzSystem:
    """trid_n(-I, trid_m(-1, 4, -1), -I) with a uniform random right-hand side."""
    phi = poisson(m)
    rhs = rng_for(seed).random((n, m))
    return BlockTridToeplitzSystem(phi.A_minus, phi.A_zero, phi.A_plus, rhs)


def cd_problem(n: int, epsilon: float = sylvester.DEFAULT_EPSILON,
               seed: int = DEFAULT_SEED) -> sylvester.GeneralizedSylvesterProblem:
    return sylvester.convection_diffusion_setup(n, epsilon, seed=seed)


@dataclass(frozen=True)
class RandomQbd:
    """A generated QBD together with how it was obtained."""

    triple: LaurentTriple
    unscaled: LaurentTriple
    alpha: float
    attempts: int
    split: SpectralSplit


def _structured_blocks(m: int, rng: np.random.Generator):
    """
    Nonnegative A_minus, A_zero + I, A_plus whose strictly triangular parts are
    restrictions of dyads sharing the same left vectors.
    """
    lower_left = rng.random(m)
    upper_left = rng.random(m)
    blocks = []
    for _ in range(3):
        lower = np.tril(np.outer(lower_left, rng.random(m)), -1)
        upper = np.triu(np.outer(upper_left, rng.random(m)), 1)
        blocks.append(lower + upper + np.diag(rng.random(m)))
    total = sum(block.sum(axis=1) for block in blocks)
    scaling = (ROW_SUM / total)[:, None]
    return [block * scaling for block in blocks]


def _balancing_alpha(split: SpectralSplit) -> float:
    """alpha = sqrt(|xi_m| |xi_{m+1}|) from the eigenvalues ordered by modulus."""
    moduli = np.sort(np.abs(np.concatenate([split.inside, split.outside])))
    m = split.m
    return float(np.sqrt(moduli[m - 1] * moduli[m]))


def random_qbd_sample(m: int, seed: int = DEFAULT_SEED) -> RandomQbd:
    if m < 2:
        raise ValueError(f"random QBD blocks need m >= 2, got {m}")
    rng = rng_for(seed)
    for attempt in range(1, MAX_ATTEMPTS + 1):
        A_minus, A_zero_shifted, A_plus = _structured_blocks(m, rng)
        unscaled = LaurentTriple(A_minus, A_zero_shifted - np.eye(m), A_plus)
        try:
            split = spectral_split(unscaled)
        except NoSplitting:
            logger.debug(f"Attempt {attempt}: eigenvalue on the unit circle, redrawing")
            continue

        alpha = 1.0
        triple = unscaled
        if not split.balanced or split.t > 1 - SPLIT_MARGIN:
            alpha = _balancing_alpha(split)
            triple = LaurentTriple(A_minus / alpha, unscaled.A_zero, A_plus * alpha)
            try:
                split = spectral_split(triple)
            except NoSplitting:
                continue

        if split.balanced and split.t <= 1 - SPLIT_MARGIN:
            logger.info(f"Random QBD m={m} seed={seed}: t={split.t:.6f}, alpha={alpha:.6f}, "
                        f"attempts={attempt}")
            return RandomQbd(triple, unscaled, alpha, attempt, split)
        logger.debug(f"Attempt {attempt}: t={split.t:.6f} misses the margin, redrawing")

    raise GenerationFailure(f"no splitting with margin {SPLIT_MARGIN} after {MAX_ATTEMPTS} attempts")


def random_qbd(m: int, seed: int = DEFAULT_SEED) -> LaurentTriple:
    return random_qbd_sample(m, seed).triple


def cluster_report(split: SpectralSplit) -> Dict[str, Any]:
    """Where the eigenvalues of phi gather: near 0, near the unit circle, far out."""
    values = np.concatenate([split.inside, split.outside])
    finite = values[np.isfinite(values)]
    moduli = np.abs(finite)
    far = moduli[moduli > 2]
    return {
        "near_zero": int(np.sum(moduli < 0.1)),
        "near_one": int(np.sum(np.abs(finite - 1) < 0.1)),
        "far": int(far.size),
        "far_median_modulus": float(np.median(far)) if far.size else None,
        "infinite": split.infinite_count,
        "t": split.t,
    }


def load_spec(path: Union[str, Path]) -> ProblemSpec:
    """Read a YAML key-value spec file (kind, m, n, seed, params)."""
    with open(path, "r") as file:
        data = yaml.safe_load(file) or {}
    spec = ProblemSpec(**data)
    logger.info(f"Loaded problem spec {spec.kind} m={spec.m} n={spec.n} from {path}")
    return spec


def build(spec: ProblemSpec):
    """Problem object for a spec: a LaurentTriple or a Sylvester problem."""
    if spec.kind == "poisson":
        return poisson(spec.m)
    if spec.kind == "random-qbd":
        return random_qbd(spec.m, spec.seed)
    epsilon = float(spec.params.get("epsilon", sylvester.DEFAULT_EPSILON))
    return cd_problem(spec.m, epsilon, spec.seed)


def build_system(spec: ProblemSpec) -> BlockTridToeplitzSystem:
    """Block tridiagonal system trid_n(A_minus, A_zero, A_plus) of a Laurent-type spec."""
    if spec.kind == "poisson":
        return poisson_system(spec.n, spec.m, spec.seed)
    if spec.kind == "random-qbd":
        phi = random_qbd(spec.m, spec.seed)
        rhs = rng_for(spec.seed + 1).random((spec.n, spec.m))
        return BlockTridToeplitzSystem(phi.A_minus, phi.A_zero, phi.A_plus, rhs)
    raise ValueError("convection-diffusion specs build a Sylvester problem, not a block system")
