"""Numerical checks of the reconstruction and KL arguments behind the de-fake generator.

Interpretation note carried into every report: squared differences of
latents are read as squared Euclidean norms summed over the latent for the
KL terms, and as per-element means for reconstruction/prediction errors
(the same reduction as the training loss).
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch
from scipy.stats import norm, spearmanr

from .diffusion import NoiseSchedule, ddim_step, forward_sample, generate
from .metrics import ScoredSet, auc

INTERPRETATION_NOTE = (
    "KL uses the squared Euclidean norm of (z0_real - z0_fake) summed over the latent; "
    "reconstruction and noise-prediction errors are per-element means."
)


@dataclass
class Check:
    name: str
    predicted: float
    measured: float
    tolerance: float
    passed: bool
    detail: str = ""


@dataclass
class TheoryReport:
    checks: list[Check] = field(default_factory=list)
    note: str = INTERPRETATION_NOTE

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    def extend(self, other: "TheoryReport"):
        self.checks.extend(other.checks)

    def to_json(self) -> str:
        return json.dumps({"note": self.note, "pass": self.passed,
                           "checks": [asdict(c) for c in self.checks]}, indent=2, default=float)

    def summary(self) -> str:
        lines = [f"# {self.note}"]
        for c in self.checks:
            lines.append(f"[{'PASS' if c.passed else 'FAIL'}] {c.name}: predicted={c.predicted:.6g} "
                         f"measured={c.measured:.6g} tol={c.tolerance:.3g} {c.detail}".rstrip())
        lines.append(f"overall: {'PASS' if self.passed else 'FAIL'}")
        return "\n".join(lines)


# --------------------------------------------------------------------------
# forward-process KL

def kl_closed_form(z0r, z0f, schedule: NoiseSchedule, t: int) -> float:
    if t < 1 or t > schedule.T:
        raise ValueError("KL is defined for 1 <= t <= T (the t = 0 forward law is degenerate)")
    a = float(schedule.alpha[t])
    d2 = float(np.sum((np.asarray(z0r, dtype=np.float64) - np.asarray(z0f, dtype=np.float64)) ** 2))
    return a / (2.0 * (1.0 - a)) * d2


def kl_monte_carlo(z0r, z0f, schedule: NoiseSchedule, t: int, n_samples: int = 100_000,
                   seed: int = 0, return_stderr: bool = False):
    """Average log-density ratio of samples drawn from the real-code forward law."""
    z0r = np.asarray(z0r, dtype=np.float64).ravel()
    z0f = np.asarray(z0f, dtype=np.float64).ravel()
    a = float(schedule.alpha[t])
    sd = math.sqrt(1.0 - a)
    mu_r, mu_f = math.sqrt(a) * z0r, math.sqrt(a) * z0f
    rng = np.random.default_rng(seed)
    x = mu_r + sd * rng.standard_normal((n_samples, z0r.size))
    log_ratio = norm.logpdf(x, mu_r, sd).sum(1) - norm.logpdf(x, mu_f, sd).sum(1)
    est = float(log_ratio.mean())
    if return_stderr:
        return est, float(log_ratio.std(ddof=1) / math.sqrt(n_samples))
    return est


def min_timestep_for_kl(eps_kl: float, diff_norm_sq: float, schedule: NoiseSchedule) -> int | None:
    """Smallest t whose alpha_t lies below 2 eps / (2 eps + |diff|^2)."""
    if eps_kl <= 0:
        raise ValueError("eps_kl must be positive")
    bound = 1.0 if math.isinf(eps_kl) else 2 * eps_kl / (2 * eps_kl + diff_norm_sq)
    hits = np.nonzero(schedule.alpha[1:] < bound)[0]
    return int(hits[0]) + 1 if hits.size else None


def kl_grid_check(schedule: NoiseSchedule, ts: Sequence[int], diffs: Sequence[float], dim: int = 4,
                  n_samples: int = 100_000, k_sigma: float = 3.0, seed: int = 0) -> TheoryReport:
    rep = TheoryReport()
    rng = np.random.default_rng(seed)
    for i, t in enumerate(ts):
        for j, dn in enumerate(diffs):
            z0r = rng.standard_normal(dim)
            u = rng.standard_normal(dim)
            z0f = z0r + dn * u / np.linalg.norm(u)
            cf = kl_closed_form(z0r, z0f, schedule, t)
            mc, se = kl_monte_carlo(z0r, z0f, schedule, t, n_samples, seed=seed + 1000 * i + j,
                                    return_stderr=True)
            tol = k_sigma * se
            rep.add(Check(f"kl t={t} |d|={dn:g}", cf, mc, tol, abs(cf - mc) <= tol))
    return rep


# --------------------------------------------------------------------------
# reverse-process algebra

def telescoping_check(schedule: NoiseSchedule, rel_tol: float = 1e-10) -> TheoryReport:
    """Per-step coefficient increments are non-negative and sum back to sqrt((1-a_t)/a_t)."""
    rep = TheoryReport()
    c = schedule.bound_coefficient(np.arange(schedule.T + 1))
    inc = np.diff(c)
    rep.add(Check("bound coefficient increments >= 0", 0.0, float(inc.min()), 0.0, bool(inc.min() >= 0)))
    worst = 0.0
    for t in range(1, schedule.T + 1):
        s = math.fsum(inc[:t])
        worst = max(worst, abs(s - c[t]) / c[t])
    rep.add(Check("telescoped sum equals sqrt((1-a_t)/a_t)", 0.0, worst, rel_tol, worst <= rel_tol))
    return rep


def generate_with_trace(z_t, t_hat: int, identity_tokens, predictor: Callable, schedule: NoiseSchedule):
    """Full-stride DDIM chain; also returns the noise prediction used at every step."""
    z = z_t
    preds = {}
    for t in range(t_hat, 0, -1):
        eps = predictor(z, t, identity_tokens)
        preds[t] = eps
        z = ddim_step(z, t, t - 1, eps, schedule)
    return z, preds


def telescoped_reconstruction(z_t, t_hat: int, eps_preds: dict, schedule: NoiseSchedule):
    """z0' = z_t / sqrt(a_t) - sum_i (c_i - c_{i-1}) eps_i, with c_i = sqrt((1-a_i)/a_i)."""
    c = schedule.bound_coefficient(np.arange(t_hat + 1))
    out = z_t / schedule.sqrt_alpha(t_hat)
    for i in range(1, t_hat + 1):
        out = out - float(c[i] - c[i - 1]) * eps_preds[i]
    return out


def oracle_roundtrip_check(schedule: NoiseSchedule, n_cases: int = 100, shape=(3, 8, 8), seed: int = 0,
                           tol: float = 1e-6) -> TheoryReport:
    from .diffusion import noise_oracle, single_step_reconstruct

    rep = TheoryReport()
    gen = torch.Generator().manual_seed(seed)
    worst_chain = worst_formula = 0.0
    bitwise = True
    for _ in range(n_cases):
        z0 = torch.rand((1, *shape), generator=gen, dtype=torch.float64)
        eps = torch.randn((1, *shape), generator=gen, dtype=torch.float64)
        t_hat = int(torch.randint(1, schedule.T + 1, (1,), generator=gen))
        z_t = forward_sample(z0, t_hat, eps, schedule)
        oracle = noise_oracle(z0, schedule)
        chain, preds = generate_with_trace(z_t, t_hat, None, oracle, schedule)
        formula = telescoped_reconstruction(z_t, t_hat, preds, schedule)
        worst_chain = max(worst_chain, float((chain - z0).abs().max()))
        worst_formula = max(worst_formula, float((chain - formula).abs().max()))
        one = generate(z_t, t_hat, None, oracle, schedule, 1)
        single = single_step_reconstruct(z_t, t_hat, None, oracle, schedule)
        bitwise &= bool(torch.equal(one, single))
    rep.add(Check("oracle DDIM chain recovers z0", 0.0, worst_chain, tol, worst_chain < tol))
    rep.add(Check("chain equals telescoped substitution", 0.0, worst_formula, 1e-9, worst_formula < 1e-9))
    rep.add(Check("one-step chain is bitwise the single-step inversion", 1.0, float(bitwise), 0.0, bitwise))
    return rep


# --------------------------------------------------------------------------
# empirical bounds with a trained generator

@torch.no_grad()
def noise_prediction_errors(predictor: Callable, images: torch.Tensor, identity_tokens,
                            schedule: NoiseSchedule, t_range: Sequence[int], n_draws: int = 1,
                            seed: int = 0) -> np.ndarray:
    """Per-t mean over samples, draws and elements of (eps - eps_theta)^2 on forward-sampled points."""
    gen = torch.Generator().manual_seed(seed)
    out = []
    for t in t_range:
        acc = 0.0
        for _ in range(n_draws):
            eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
            z_t = forward_sample(images, int(t), eps, schedule)
            acc += float(((eps - predictor(z_t, int(t), identity_tokens)) ** 2).mean())
        out.append(acc / n_draws)
    return np.array(out)


def estimate_delta_eps(predictor: Callable, images: torch.Tensor, identity_tokens, schedule: NoiseSchedule,
                       t_range: Sequence[int], n_draws: int = 1, seed: int = 0) -> float:
    return float(noise_prediction_errors(predictor, images, identity_tokens, schedule, t_range,
                                         n_draws, seed).max())


@torch.no_grad()
def reconstruction_errors(predictor: Callable, images: torch.Tensor, identity_tokens, schedule: NoiseSchedule,
                          t_list: Sequence[int], n_steps: int, n_draws: int = 1, seed: int = 0,
                          per_sample: bool = False) -> np.ndarray:
    """Mean (or per-sample) squared reconstruction error after noising to t and regenerating."""
    gen = torch.Generator().manual_seed(seed)
    out = []
    for t in t_list:
        acc = torch.zeros(images.shape[0], dtype=torch.float64)
        for _ in range(n_draws):
            eps = torch.randn(images.shape, generator=gen, dtype=images.dtype)
            z_t = forward_sample(images, int(t), eps, schedule)
            z0 = generate(z_t, int(t), identity_tokens, predictor, schedule, min(n_steps, int(t)))
            acc += ((images - z0) ** 2).flatten(1).mean(1).double()
        acc /= n_draws
        out.append(acc.numpy() if per_sample else float(acc.mean()))
    return np.array(out)


@dataclass
class ReconstructionCurve:
    t: list[int]
    error: list[float]
    coefficient: list[float]
    bound: list[float]
    delta_eps: float
    spearman: float

    def report(self, slack: float, min_rho: float = 0.9) -> TheoryReport:
        rep = TheoryReport()
        for t, e, b in zip(self.t, self.error, self.bound):
            rep.add(Check(f"reconstruction bound t={t}", b, e, slack, e <= b,
                          detail="predicted is the slack-inflated upper bound"))
        rep.add(Check("reconstruction error increases with t (Spearman)", min_rho, self.spearman, 0.0,
                      self.spearman > min_rho))
        return rep


def reconstruction_error_curve(predictor: Callable, images: torch.Tensor, identity_tokens,
                               schedule: NoiseSchedule, t_list: Sequence[int], n_steps: int = 10,
                               n_draws: int = 2, slack: float = 0.25, delta_eps: float | None = None,
                               t_range: Sequence[int] | None = None, seed: int = 0) -> ReconstructionCurve:
    t_list = [int(t) for t in t_list]
    if delta_eps is None:
        t_range = t_range if t_range is not None else range(1, max(t_list) + 1)
        delta_eps = estimate_delta_eps(predictor, images, identity_tokens, schedule, t_range, 1, seed + 7)
    err = reconstruction_errors(predictor, images, identity_tokens, schedule, t_list, n_steps, n_draws, seed)
    coef = schedule.bound_coefficient(t_list)
    bound = coef * delta_eps * (1.0 + slack)
    rho = float(spearmanr(t_list, err).correlation) if len(t_list) > 1 else 1.0
    return ReconstructionCurve(t_list, err.tolist(), coef.tolist(), bound.tolist(), delta_eps, rho)


def fake_cue_bound_check(predictor: Callable, real_images: torch.Tensor, fake_images: torch.Tensor,
                         real_tokens, fake_tokens, schedule: NoiseSchedule, t_hat: int, n_steps: int = 10,
                         n_draws: int = 2, min_rate: float = 0.95, seed: int = 0) -> Check:
    """Cue energy of each fake versus its spoof-trace energy minus the real reconstruction error.

    ``real_images[i]`` and ``fake_images[i]`` must be the same capture with and
    without the spoof trace.  The subtracted term is the largest real-input
    reconstruction error seen on the pairs, i.e. a uniform bound over the set.
    """
    lhs = reconstruction_errors(predictor, fake_images, fake_tokens, schedule, [t_hat], n_steps,
                                n_draws, seed, per_sample=True)[0]
    real_err = reconstruction_errors(predictor, real_images, real_tokens, schedule, [t_hat], n_steps,
                                     n_draws, seed + 1, per_sample=True)[0]
    delta_z0 = float(real_err.max())
    trace = ((fake_images - real_images) ** 2).flatten(1).mean(1).double().numpy()
    rhs = trace - delta_z0
    ok = lhs > rhs
    rate = float(ok.mean())
    return Check(f"fake cue lower bound t={t_hat}", min_rate, rate, 0.0, rate >= min_rate,
                 detail=f"violations={int((~ok).sum())}/{ok.size} delta_z0={delta_z0:.4g}")


def tradeoff_report(cue_energy_by_t: dict[int, np.ndarray], labels: np.ndarray,
                    tol: float = 1e-9) -> tuple[TheoryReport, dict]:
    """Real-cue energy should grow with t; real/fake separability should peak strictly inside the grid."""
    ts = sorted(cue_energy_by_t)
    labels = np.asarray(labels).astype(int)
    real_energy = [float(cue_energy_by_t[t][labels == 0].mean()) for t in ts]
    seps = [auc(ScoredSet(cue_energy_by_t[t], labels)) for t in ts]
    rep = TheoryReport()
    rho = float(spearmanr(ts, real_energy).correlation) if len(ts) > 1 else 1.0
    rep.add(Check("real cue energy grows with t_hat (Spearman)", 0.9, rho, 0.0, rho > 0.9))
    peak = int(np.argmax(seps))
    rep.add(Check("separability at smallest t_hat below peak", seps[peak], seps[0], tol, seps[0] < seps[peak]))
    rep.add(Check("separability at largest t_hat below peak", seps[peak], seps[-1], tol, seps[-1] < seps[peak]))
    table = {"t_hat": ts, "real_energy": real_energy, "auc": seps}
    return rep, table


def spoof_pairs(n: int, rng_seed: int = 0, attack_types: Sequence[str] = ("print", "replay"),
                strength_range: tuple[float, float] = (0.3, 0.7)):
    """``n`` same-capture (real, fake) image pairs over the default domains, as B x C x H x W tensors."""
    from .diffusion import images_to_tensor
    from .synthdata import IdentityVector, apply_spoof, default_domains, render_real

    domains = default_domains()
    rng = np.random.default_rng(rng_seed)
    reals, fakes = [], []
    for i in range(n):
        seed = int(rng.integers(2 ** 31))
        real = render_real(IdentityVector.from_seed(500_000 + i), domains[i % len(domains)], seed,
                           subject_id=500_000 + i)
        fake = apply_spoof(real, attack_types[i % len(attack_types)], float(rng.uniform(*strength_range)), seed)
        reals.append(real)
        fakes.append(fake)
    return images_to_tensor(reals), images_to_tensor(fakes)
