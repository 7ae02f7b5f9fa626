"""KAM iteration: basic step, finite induction and the outer schedule.

A run works at one parameter point ``rho``. The Hamiltonian is split as
``h + f`` with ``h`` a quadratic normal form and ``f`` the perturbation.
Each basic step solves the nonlinear homological equation for a jet ``S``,
moves the normal-form increment into ``h`` and replaces ``f`` by the part
of ``(h + f) o Phi_S`` that is not normal form, where ``Phi_S`` is the
time-one flow of ``S``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .block_matrix import BlockMatrix, NormalFormMatrix
from .errors import (ScheduleInfeasible, SmallDivisorExclusion,
                     SmallnessViolation)
from .homological import (HomologicalSolution, normal_form_jet,
                          solve_nonlinear)
from .lattice_blocks import (INF_DELTA, BlockDecomposition, LatticeModel,
                             WeightParams, block_diameter, decompose,
                             is_infinite)
from .phase_functions import (DomainSpec, Momentum, PhaseFunction, PhasePoint,
                              bracket, flow_point, momentum_project, t_norm)
from .small_divisors import NormalFormData

log = logging.getLogger(__name__)


# ------------------------------------------------------------ normal form

@dataclass
class NormalFormHamiltonian:
    """``const + <omega(rho), r> + 1/2 <w, (A_up(rho) + A_corr) w>``.

    ``A_up`` carries ``lambda_a`` on each Lambda_inf site (as ``lambda_a I``
    on the ``(p, q)`` pair) and ``H_F`` on the F sites. ``A_corr`` collects
    the normal-form increments of a run; increments are computed at the
    run's parameter point and stored as constants.
    """

    model: LatticeModel
    omega_fn: Callable
    lam_fn: Callable
    HF_fn: Callable | None = None
    A_corr: np.ndarray | None = None
    omega_shift: np.ndarray | None = None
    const: float = 0.0
    kappa_decay: float = 1.0
    constants: dict = field(default_factory=dict)
    delta_history: list = field(default_factory=list)

    def __post_init__(self):
        nw = 2 * self.model.n_normal
        if self.A_corr is None:
            self.A_corr = np.zeros((nw, nw))
        if self.omega_shift is None:
            self.omega_shift = np.zeros(self.model.n_angles)

    def A_up(self, rho) -> np.ndarray:
        m = self.model
        nw = 2 * m.n_normal
        A = np.zeros((nw, nw))
        nF = m.n_F
        if nF:
            A[:2 * nF, :2 * nF] = np.asarray(self.HF_fn(rho), float)
        lam = np.asarray(self.lam_fn(rho), float)
        idx = 2 * nF + 2 * np.arange(len(lam))
        A[idx, idx] = lam
        A[idx + 1, idx + 1] = lam
        return A

    def omega(self, rho) -> np.ndarray:
        return np.asarray(self.omega_fn(rho), float) + self.omega_shift

    def evaluate(self, rho) -> NormalFormData:
        return NormalFormData(self.model, self.omega(rho),
                              self.A_up(rho) + self.A_corr)

    def value(self, rho, r, w) -> np.ndarray:
        """Pointwise value at stacked points ``r (P, nA)``, ``w (P, nw)``."""
        nf = self.evaluate(rho)
        r = np.atleast_2d(r)
        w = np.atleast_2d(w)
        return (self.const + r @ nf.omega
                + 0.5 * np.einsum("pi,ij,pj->p", w, nf.A, w))

    def with_increment(self, sol: HomologicalSolution,
                       decomp: BlockDecomposition) -> "NormalFormHamiltonian":
        out = replace(self, A_corr=self.A_corr + sol.B,
                      omega_shift=self.omega_shift + sol.omega_plus,
                      const=self.const + sol.const,
                      delta_history=list(self.delta_history))
        out.delta_history.append(out.hypothesis_B(decomp))
        return out

    def correction_matrix(self, decomp: BlockDecomposition) -> NormalFormMatrix:
        return NormalFormMatrix(BlockMatrix.from_dense(self.model, self.A_corr),
                                decomp.delta, decomp)

    def hypothesis_B(self, decomp: BlockDecomposition) -> float:
        """Measured ``delta = max_[a] ||(A_corr)_[a]|| <a>^kappa``."""
        worst = 0.0
        for b in range(decomp.n_blocks):
            if decomp.is_F(b):
                continue
            ix = decomp.indices(b)
            z = np.concatenate([2 * ix, 2 * ix + 1])
            blk = self.A_corr[np.ix_(z, z)]
            if not blk.size:
                continue
            nrm = math.sqrt(decomp.block_norm2(b))
            worst = max(worst, float(np.linalg.norm(blk, 2))
                        * max(nrm, 1.0) ** self.kappa_decay)
        return worst


def nf_as_function(nfh: NormalFormHamiltonian, rho, n_theta: int) -> PhaseFunction:
    nf = nfh.evaluate(rho)
    return normal_form_jet(nf, n_theta, nfh.const)


# ------------------------------------------------------------ schedule

@dataclass
class KamSchedule:
    """Parameter ladders of the outer iteration, indexed from ``j = 1``."""

    sigma_j: list
    mu_j: list
    eps_j: list
    xi_j: list
    delta_j: list
    Delta_j: list
    gamma_j: list
    kappa_j: list
    K_j: list
    log_X_j: list
    log_Y_j: list
    constants: dict

    def rows(self):
        for j in range(len(self.sigma_j)):
            yield (j + 1, self.sigma_j[j], self.mu_j[j], self.eps_j[j],
                   self.xi_j[j], self.delta_j[j], self.Delta_j[j],
                   self.gamma_j[j], self.kappa_j[j], self.K_j[j])


def _diam(model: LatticeModel | None, Delta) -> float:
    if model is None:
        return 1.0
    return block_diameter(decompose(model, Delta))


def make_schedule(sigma: float, mu: float, Delta, eps: float, chi: float = 1.0,
                  delta: float = 0.0, xi: float | None = None, K: int = 2,
                  max_steps: int = 5, C: float = 10.0, exp2: float = 4.0,
                  exp3: float = 7.0, model: LatticeModel | None = None
                  ) -> KamSchedule:
    """Build the outer-iteration ladders.

    ``kappa_j`` solves ``eps_j = kappa_j / (C X_j Y_j)`` with
    ``Y_j = ((chi + delta_j + xi_j)/kappa_j)^exp3``; the solution is
    ``kappa_j = (C X_j (chi+delta_j+xi_j)^exp3 eps_j)^(1/(1+exp3))``,
    computed in log space.
    """
    if not (0 < sigma <= 1 and 0 < mu <= 1):
        raise ScheduleInfeasible(0, "need 0 < sigma, mu <= 1")
    if not 0 < eps < 1:
        raise ScheduleInfeasible(0, "need 0 < eps < 1")
    if not is_infinite(Delta) and Delta < 1:
        raise ScheduleInfeasible(0, "need Delta >= 1")
    xi = eps if xi is None else max(xi, eps)
    L = math.log(1.0 / eps)
    sig = [(0.5 + 2.0 ** -j) * sigma for j in range(1, max_steps + 2)]
    mus = [(0.5 + 2.0 ** -j) * mu for j in range(1, max_steps + 2)]
    Ks = [K ** j for j in range(1, max_steps + 1)]
    Deltas = [Delta]
    gammas = [1.0 / max(_diam(model, Delta), 1.0)]
    epss, xis, dels, kaps, lX, lY = [eps], [xi], [delta], [], [], []
    for j in range(1, max_steps + 1):
        i = j - 1
        dj = _diam(model, Deltas[i])
        nxt = 4 * Ks[i] * max(1.0 / (sig[i] - sig[i + 1]), dj) * L
        Deltas.append(nxt)
        gammas.append(1.0 / max(_diam(model, nxt), 1.0))
        logX = exp2 * math.log(Ks[i] * nxt * math.e * 4.0 ** (j + 1)
                               / (sigma * mu) * L)
        base = chi + dels[i] + xis[i]
        if epss[i] > 0:
            logk = (math.log(C) + logX + exp3 * math.log(base)
                    + math.log(epss[i])) / (1 + exp3)
        else:
            logk = -math.inf
        kap = math.exp(logk) if logk < 700 else math.inf
        kaps.append(kap)
        lX.append(logX)
        lY.append(exp3 * (math.log(base) - logk) if logk > -math.inf
                  else math.inf)
        if j == max_steps:
            break
        # C X_j Y_j eps_j equals kappa_j by construction
        if j == 1:
            k1 = kap
        e_next = eps ** Ks[i] * k1 if eps ** Ks[i] > 0 else 0.0
        if e_next >= epss[i] and epss[i] > 0:
            raise ScheduleInfeasible(j, f"predicted eps_{j + 1}={e_next:.3e} "
                                        f">= eps_{j}={epss[i]:.3e}")
        epss.append(e_next)
        xis.append(xis[i] + kap)
        dels.append(dels[i] + kap)
    n = max_steps
    return KamSchedule(sig[:n], mus[:n], epss[:n], xis[:n], dels[:n],
                       Deltas[:n], gammas[:n], kaps[:n], Ks[:n], lX[:n],
                       lY[:n], {"C": C, "exp2": exp2, "exp3": exp3, "K": K})


# ------------------------------------------------------------ basic step

@dataclass
class StepReport:
    j: int
    inner: int
    eps_in: float
    eps_out: float
    xi: float
    delta: float
    kappa: float
    Delta: object
    N: int
    residual: float
    worst_divisor: float
    excluded: tuple | None = None
    tail: float = 0.0


@dataclass
class BasicStepResult:
    S: PhaseFunction
    solution: HomologicalSolution | None
    h: NormalFormHamiltonian
    f: PhaseFunction
    report: StepReport


def jet_norm(f: PhaseFunction, dom: DomainSpec, n_x: int = 64, seed: int = 0
             ) -> float:
    """Sampled T-norm of the jet of ``f``."""
    jet = f.jet()
    if jet.max_abs() == 0.0:
        return 0.0
    return t_norm(jet, dom, n_x=n_x, seed=seed).total


def sample_real_points(model: LatticeModel, mu: float, n: int, seed: int):
    """Real phase points with ``|r|, ||w|| <= mu``."""
    rng = np.random.default_rng(seed)
    nA, nw = model.n_angles, 2 * model.n_normal
    r = mu * rng.uniform(-1, 1, size=(n, nA))
    theta = rng.uniform(0, 2 * np.pi, size=(n, nA))
    w = rng.normal(size=(n, nw))
    nrm = np.linalg.norm(w, axis=1, keepdims=True)
    nrm[nrm == 0] = 1.0
    w = mu * rng.uniform(0, 1, size=(n, 1)) * w / nrm
    return r, theta, w


def conjugacy_residual(h0: NormalFormHamiltonian, f0: PhaseFunction,
                       h1: NormalFormHamiltonian, f1: PhaseFunction,
                       generators: list, rho, mu: float, n_points: int = 32,
                       seed: int = 0) -> float:
    """``max |(h0+f0)(Phi x) - (h1+f1)(x)| / (1 + |(h0+f0)(Phi x)|)``.

    ``Phi`` is the composition of the time-one flows of ``generators`` in
    the order they were applied, so the last generator acts first.
    """
    r, th, w = sample_real_points(h1.model, mu, n_points, seed)
    worst = 0.0
    for i in range(n_points):
        x = PhasePoint(r[i], th[i], w[i])
        for S in reversed(generators):
            x = flow_point(S, 1.0, x)
        ra, ta, wa = (np.real(x.r)[None], np.real(x.theta)[None],
                      np.real(x.w)[None])
        lhs = h0.value(rho, ra, wa)[0] + f0(ra, ta, wa)[0]
        rhs = (h1.value(rho, r[i:i + 1], w[i:i + 1])[0]
               + f1(r[i:i + 1], th[i:i + 1], w[i:i + 1])[0])
        worst = max(worst, abs(lhs - rhs) / (1.0 + abs(lhs)))
    return float(worst)


def basic_step(h: NormalFormHamiltonian, f: PhaseFunction, rho, kappa: float,
               N: int, delta_prime, decomp: BlockDecomposition,
               dom_in: DomainSpec, dom_out: DomainSpec,
               momentum: Momentum | None = None, n_lie: int = 8,
               verify: bool = True, n_check: int = 32, n_norm: int = 64,
               seed: int = 0, j: int = 1, inner: int = 1) -> BasicStepResult:
    """One homological solve followed by the Lie transform.

    Returns the new normal form ``h + h_+`` and the new perturbation
    ``f_+ = R + f_hi + {S, f^T} + nonjet{S, f_hi} + sum_{n>=2} ad_S^(n-1) Y/n!``
    with ``Y = {S, h + f}``; this form avoids subtracting ``h`` from its own
    transform.
    """
    eps_in = jet_norm(f, dom_in, n_norm, seed)
    if eps_in == 0.0:
        rep = StepReport(j, inner, 0.0, 0.0, f.max_abs(), 0.0, kappa,
                         delta_prime, N, 0.0, math.inf)
        return BasicStepResult(PhaseFunction(f.model, f.N), None, h, f, rep)
    nf = h.evaluate(rho)
    sol = solve_nonlinear(nf, f, kappa, N, delta_prime, decomp, momentum)
    S = sol.S
    fT = f.jet()
    f_hi = f.nonjet()
    b_T = bracket(S, fT)
    b_hi = bracket(S, f_hi)
    Y = (sol.h_plus_jet(f.N) + sol.R - fT + b_T + b_hi.nonjet())
    f_plus = sol.R + f_hi + b_T + b_hi.nonjet()
    term = Y
    tail = max(b_T.tail, b_hi.tail)
    for n in range(2, n_lie + 1):
        term = bracket(S, term)
        tail = max(tail, term.tail)
        f_plus = f_plus + term.scale(1.0 / math.factorial(n))
        if term.max_abs() == 0.0:
            break
    if momentum is not None:
        f_plus = momentum_project(f_plus, momentum)
    f_plus.enforce_reality()
    h_new = h.with_increment(sol, decomp)
    residual = 0.0
    if verify:
        residual = conjugacy_residual(h, f, h_new, f_plus, [S], rho,
                                      dom_out.mu, n_check, seed)
    eps_out = jet_norm(f_plus, dom_out, n_norm, seed)
    rep = StepReport(j, inner, eps_in, eps_out, f_plus.max_abs(),
                     h_new.delta_history[-1], kappa, delta_prime, N, residual,
                     sol.worst_divisor, None, tail)
    log.debug("step %d.%d eps %.3e -> %.3e residual %.2e", j, inner, eps_in,
              eps_out, residual)
    return BasicStepResult(S, sol, h_new, f_plus, rep)


# ------------------------------------------------------------ induction

@dataclass
class InductionResult:
    h: NormalFormHamiltonian
    f: PhaseFunction
    generators: list
    reports: list
    status: str = "ok"


def retained_modes(Delta_prime, n_angles: int, n_theta: int) -> int:
    """``N = min(Delta', nA * n_theta)``: every stored mode when Delta' is large."""
    cap = max(n_angles, 1) * n_theta
    if is_infinite(Delta_prime):
        return cap
    return int(min(math.floor(Delta_prime), cap))


def finite_induction(h: NormalFormHamiltonian, f: PhaseFunction, rho,
                     kappa: float, Delta_prime, K: int, sigma: float,
                     sigma_out: float, mu: float, mu_out: float,
                     weights: WeightParams, momentum: Momentum | None = None,
                     j: int = 1, verify: bool = True, seed: int = 0,
                     n_norm: int = 64, n_check: int = 32,
                     stop_below: float = 0.0) -> InductionResult:
    """``K`` basic steps at fixed ``Delta'`` over arithmetic sigma/mu ladders.

    Stops early once the jet norm drops to ``stop_below`` and reports
    ``status="contraction-failure"`` when a step does not decrease it.
    """
    decomp = decompose(h.model, Delta_prime)
    N = retained_modes(Delta_prime, h.model.n_angles, f.N)
    gens, reps = [], []
    for i in range(1, K + 1):
        s_in = sigma - (i - 1) * (sigma - sigma_out) / K
        s_out = sigma - i * (sigma - sigma_out) / K
        m_in = mu - (i - 1) * (mu - mu_out) / K
        m_out = mu - i * (mu - mu_out) / K
        res = basic_step(h, f, rho, kappa, N, Delta_prime, decomp,
                         DomainSpec(s_in, m_in, weights),
                         DomainSpec(s_out, m_out, weights), momentum,
                         verify=verify, n_check=n_check, n_norm=n_norm,
                         seed=seed, j=j, inner=i)
        reps.append(res.report)
        if res.solution is None:
            break
        gens.append(res.S)
        h, f = res.h, res.f
        rep = res.report
        if rep.eps_out >= rep.eps_in:
            return InductionResult(h, f, gens, reps, "contraction-failure")
        if rep.eps_out <= stop_below:
            break
    return InductionResult(h, f, gens, reps, "ok")


# ------------------------------------------------------------ driver

@dataclass
class KamConfig:
    sigma: float = 0.5
    mu: float = 0.5
    Delta: object = INF_DELTA
    eps_tol: float = 1e-12
    max_steps: int = 5
    K: int = 2
    C: float = 10.0
    exp2: float = 4.0
    s_star: int = 1
    chi: float = 1.0
    delta: float = 0.0
    kappa_cap: float = 1e-3
    gamma2: float = 3.0
    kappa_decay: float = 1.0
    C_w: float = 1.0
    c_prime: float = 1.0
    verify: bool = True
    n_norm: int = 64
    n_check: int = 32
    seed: int = 0

    @property
    def exp3(self) -> float:
        return 4 * self.s_star + 3


@dataclass
class Verdict:
    kind: str
    j: int
    divisor: float | None = None
    k: tuple | None = None
    blocks: tuple | None = None

    def __str__(self) -> str:
        if self.kind == "excluded":
            return (f"excluded(j={self.j}, k={self.k}, blocks={self.blocks}, "
                    f"divisor={self.divisor:.6e})")
        if self.kind == "stalled":
            return f"stalled(j={self.j})"
        return f"converged(j={self.j})"


@dataclass
class RunResult:
    h: NormalFormHamiltonian
    f: PhaseFunction
    generators: list
    reports: list
    verdict: Verdict
    eps_trail: list
    residuals: list
    schedule: KamSchedule | None
    checks: dict = field(default_factory=dict)

    @property
    def eps_final(self) -> float:
        return self.eps_trail[-1]

    def log_rows(self):
        for r in self.reports:
            yield (r.j, r.inner, r.eps_in, r.eps_out, r.xi, r.delta, r.kappa,
                   r.Delta, r.residual, "")
        yield (self.verdict.j, 0, self.eps_final, self.eps_final, "", "", "",
               "", "", str(self.verdict))

    def log_tsv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, delimiter="\t", lineterminator="\n")
        w.writerow(["j", "inner", "eps_in", "eps_out", "xi", "delta",
                    "kappa", "Delta", "residual", "verdict"])
        for row in self.log_rows():
            w.writerow([_fmt(v) for v in row])
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.6e}"
    if v is INF_DELTA:
        return "inf"
    return str(v)


def run_kam(h: NormalFormHamiltonian, f: PhaseFunction, rho,
            cfg: KamConfig | None = None, momentum: Momentum | None = None,
            schedule: KamSchedule | None = None) -> RunResult:
    """Outer iteration along the schedule at one parameter point."""
    cfg = cfg or KamConfig()
    model = h.model
    gamma1 = 1.0 / max(_diam(model, cfg.Delta), 1.0)
    weights = WeightParams(gamma1, cfg.gamma2, cfg.kappa_decay, cfg.C_w)
    eps0 = jet_norm(f, DomainSpec(cfg.sigma, cfg.mu, weights), cfg.n_norm,
                    cfg.seed)
    trail, gens, reps, resid = [eps0], [], [], []
    if eps0 <= cfg.eps_tol:
        return RunResult(h, f, gens, reps, Verdict("converged", 0), trail,
                         resid, None, {"jet_norm": eps0})
    if schedule is None:
        schedule = make_schedule(cfg.sigma, cfg.mu, cfg.Delta, min(eps0, 0.5),
                                 cfg.chi, cfg.delta, f.max_abs(), cfg.K,
                                 cfg.max_steps, cfg.C, cfg.exp2, cfg.exp3,
                                 model)
    h0, f0 = h, f
    verdict = None
    for j in range(1, cfg.max_steps + 1):
        i = j - 1
        sig_in = schedule.sigma_j[i]
        sig_out = (0.5 + 2.0 ** -(j + 1)) * cfg.sigma
        mu_in = schedule.mu_j[i]
        mu_out = (0.5 + 2.0 ** -(j + 1)) * cfg.mu
        kappa = min(schedule.kappa_j[i], cfg.kappa_cap)
        w_j = weights.with_(gamma1=schedule.gamma_j[i])
        try:
            ind = finite_induction(h, f, rho, kappa, schedule.Delta_j[i],
                                   schedule.K_j[i], sig_in, sig_out, mu_in,
                                   mu_out, w_j, momentum, j, cfg.verify,
                                   cfg.seed, cfg.n_norm, cfg.n_check,
                                   cfg.eps_tol)
        except SmallDivisorExclusion as exc:
            verdict = Verdict("excluded", j, exc.divisor, tuple(exc.k),
                              exc.blocks)
            break
        except SmallnessViolation:
            verdict = Verdict("stalled", j)
            break
        reps.extend(ind.reports)
        gens.extend(ind.generators)
        h, f = ind.h, ind.f
        eps_j = ind.reports[-1].eps_out if ind.reports else trail[-1]
        if cfg.verify and ind.generators:
            resid.append(conjugacy_residual(h0, f0, h, f, gens, rho,
                                            mu_out, cfg.n_check, cfg.seed))
        trail.append(eps_j)
        if ind.status != "ok":
            verdict = Verdict("stalled", j)
            break
        if eps_j <= cfg.eps_tol:
            verdict = Verdict("converged", j)
            break
    if verdict is None:
        verdict = Verdict("stalled", cfg.max_steps)
    checks = {}
    if verdict.kind == "converged":
        last = decompose(model, schedule.Delta_j[min(verdict.j,
                                                     len(schedule.Delta_j)) - 1])
        checks["delta_prime"] = h.hypothesis_B(last)
        checks["delta_ok"] = checks["delta_prime"] <= cfg.c_prime / 2
        checks["nf_valid"] = h.correction_matrix(last).is_valid(1e-12)
    return RunResult(h, f, gens, reps, verdict, trail, resid, schedule, checks)
