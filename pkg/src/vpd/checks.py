"""Machine-checkable versions of the method's identities and gradients.

Each check returns a :class:`CheckResult` with the worst residual it saw.
``run_suite`` bundles them for the ``oracle-check`` command.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass

import numpy as np

from . import oracle
from .baselines import (HybridConfig, clipped_surrogate, grpo_loss, hybrid_joint_loss,
                        reshape_advantage, reweight_advantage, sdpo_token_advantage)
from .env import EnvSpec, FeedbackRecord
from .errors import EnumerationCapExceeded
from .estep import EStepBatch, EStepState, bco_loss, decoupled_bound, dpo_pair_loss
from .mstep import DIVERGENCES, DistillConfig, distill_loss
from .policy import (Context, PolicyParams, Trajectory, logprob_grad, sequence_logprob,
                     token_logprobs)

IDENTITY_TOL = 1e-9
BOUND_SLACK = 1e-12
GRAD_RTOL = 1e-5
FD_STEP = 1e-5


@dataclass
class CheckResult:
    name: str
    max_residual: float
    tolerance: float
    n: int
    passed: bool
    seconds: float = 0.0

    def record(self) -> dict:
        return asdict(self)


def _result(name, residuals, tol, t0, violations=None):
    r = float(np.max(residuals)) if len(residuals) else 0.0
    ok = r <= tol if violations is None else violations == 0
    return CheckResult(name, r, tol, len(residuals), bool(ok), time.perf_counter() - t0)


# --- oracle identities ----------------------------------------------------------------

def _random_setup(env, rng):
    seqs = oracle.response_space(env.vocab.n_out, env.response_len)
    x = tuple(int(v) for v in rng.integers(0, env.vocab_size, env.prompt_len))
    return seqs, x


def identity_suite(env: EnvSpec, beta: float, n: int = 100, seed: int = 0, corrupt: str | None = None):
    """The four exact identities, each over ``n`` random distributions.

    ``corrupt`` names one identity whose right-hand side gets a wrong beta; it
    exists only as a negative control.
    """
    rng = np.random.default_rng(seed)
    seqs, x = _random_setup(env, rng)

    def b(name):
        return beta * 1.5 if corrupt == name else beta

    res = {k: [] for k in ("rlvr-reverse-kl-equivalence", "elbo-decomposition",
                           "sliding-trust-region", "alignment-bonus-constancy")}
    t0 = time.perf_counter()
    ref = oracle.random_dist(seqs, rng)
    logz = oracle.partition_function(ref, env, x, beta)
    pstar = oracle.optimal_policy(ref, env, x, beta)
    consts = []
    for _ in range(n):
        pi = oracle.random_dist(seqs, rng)
        q = oracle.random_dist(seqs, rng)
        student = oracle.random_dist(seqs, rng)
        # J(pi) = beta log Z - beta KL(pi || pi*)
        name = "rlvr-reverse-kl-equivalence"
        lhs = oracle.exact_objective(pi, ref, env, x, beta)
        res[name].append(abs(lhs - (b(name) * logz - b(name) * oracle.exact_kl(pi, pstar))))
        # log Z = F(q) + KL(q || pi*)
        name = "elbo-decomposition"
        f = oracle.expected_reward(q, env, x) / b(name) - oracle.exact_kl(q, ref)
        res[name].append(abs(logz - (f + oracle.exact_kl(q, pstar))))
        # KL(q || pi*_dyn) - log Z_dyn + E_q[r]/beta - KL(q || pi_theta) = 0
        name = "sliding-trust-region"
        dyn = oracle.optimal_policy(student, env, x, beta)
        logz_dyn = oracle.partition_function(student, env, x, beta)
        val = (oracle.exact_kl(q, dyn) - logz_dyn + oracle.expected_reward(q, env, x) / b(name)
               - oracle.exact_kl(q, student))
        res[name].append(abs(val))
        consts.append((q, student, dyn, logz_dyn))
    # KL(q || pi*_dyn) - KL(q || pi*) + E_q[log pi_theta / pi_ref] is the same for every q.
    name = "alignment-bonus-constancy"
    student = consts[0][1]
    dyn, logz_dyn = consts[0][2], consts[0][3]
    vals = []
    for q, *_ in consts:
        align = float(np.sum(q.probs * (student.logp - ref.logp)))
        vals.append(oracle.exact_kl(q, dyn) - oracle.exact_kl(q, pstar) + align)
    vals = np.array(vals)
    if corrupt == name:
        vals = vals * np.linspace(1.0, 1.5, len(vals))
    expected = logz_dyn - logz
    res[name] = list(np.abs(vals - vals.mean())) + [abs(vals.mean() - expected)]
    return [_result(k, v, IDENTITY_TOL, t0) for k, v in res.items()]


def optimality_check(n_envs: int = 3, n_perturb: int = 1000, beta: float = 0.1, seed: int = 0,
                     vocab_size: int = 4, length: int = 3):
    """J(pi*) >= J(pi) for Dirichlet-perturbed pi on several random environments."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    gaps, violations = [], 0
    for _ in range(n_envs):
        env = EnvSpec("keyed-copy", vocab_size, length, length, int(rng.integers(1, 2 ** 31)))
        seqs, x = _random_setup(env, rng)
        ref = oracle.random_dist(seqs, rng)
        pstar = oracle.optimal_policy(ref, env, x, beta)
        j_star = oracle.exact_objective(pstar, ref, env, x, beta)
        for _ in range(n_perturb):
            eps = rng.uniform(0.01, 1.0)
            noise = rng.dirichlet(np.ones(len(seqs)))
            pi = oracle.DistTable.from_probs(seqs, (1 - eps) * pstar.probs + eps * noise)
            j = oracle.exact_objective(pi, ref, env, x, beta)
            gaps.append(max(0.0, j - j_star))
            violations += int(j > j_star)
    return _result("optimal-policy-optimality", gaps, 0.0, t0, violations)


def bco_bound_check(n: int = 10_000, seed: int = 0, scale: float = 5.0):
    """Paired logistic loss never exceeds the decoupled two-term bound."""
    t0 = time.perf_counter()
    rng = np.random.default_rng(seed)
    excess, violations = [], 0
    for rp, rn in rng.normal(scale=scale, size=(n, 2)):
        e = dpo_pair_loss(rp, rn) - decoupled_bound(rp, rn)
        excess.append(max(0.0, e))
        violations += int(e > BOUND_SLACK)
    return _result("bco-upper-bound", excess, BOUND_SLACK, t0, violations)


# --- finite-difference gradient checks ---------------------------------------------------

def fd_gradient(loss_fn, params: PolicyParams, keys=None, eps: float = FD_STEP):
    """Central differences of ``loss_fn(params)`` over the chosen coordinates.

    For tabular stores ``keys`` lists the rows to perturb; linear stores
    perturb every weight.  Returns a dict key -> row (or the weight matrix).
    """
    if params.kind == "linear-softmax":
        g = np.zeros_like(params.weights)
        for idx in np.ndindex(*params.weights.shape):
            old = params.weights[idx]
            params.weights[idx] = old + eps
            up = loss_fn(params)
            params.weights[idx] = old - eps
            down = loss_fn(params)
            params.weights[idx] = old
            g[idx] = (up - down) / (2 * eps)
        return g
    out = {}
    n = params.vocab.n_out
    for k in keys:
        row = params.table.get(k)
        base = np.zeros(n) if row is None else row.copy()
        g = np.zeros(n)
        for j in range(n):
            r = base.copy()
            r[j] += eps
            params.table[k] = r
            up = loss_fn(params)
            r = base.copy()
            r[j] -= eps
            params.table[k] = r
            down = loss_fn(params)
            g[j] = (up - down) / (2 * eps)
        if row is None:
            del params.table[k]
        else:
            params.table[k] = row
        out[k] = g
    return out


def relative_error(analytic, numeric) -> float:
    a, b = np.ravel(analytic), np.ravel(numeric)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def compare_grad(loss_fn, params: PolicyParams, grad, extra_keys=()):
    if params.kind == "linear-softmax":
        num = fd_gradient(loss_fn, params)
        ana = np.zeros_like(num) if grad.weights is None else grad.weights
        return relative_error(ana, num)
    keys = sorted(set(grad.table) | set(extra_keys))
    num = fd_gradient(loss_fn, params, keys)
    n = params.vocab.n_out
    ana = np.concatenate([grad.get(k, n) for k in keys])
    return relative_error(ana, np.concatenate([num[k] for k in keys]))


class _Instances:
    """Random tabular/linear stores with trajectories and feedback for a toy env."""

    def __init__(self, env: EnvSpec, seed: int):
        self.env = env
        self.rng = np.random.default_rng(seed)
        self.vocab = env.vocab

    def prompt(self):
        return tuple(int(v) for v in self.rng.integers(0, self.env.vocab_size, self.env.prompt_len))

    def response(self):
        return tuple(int(v) for v in self.rng.integers(0, self.vocab.n_out, self.env.response_len))

    def feedback(self):
        toks = (self.vocab.token("ERR"),) + tuple(
            int(v) for v in self.rng.integers(0, self.vocab.total, self.rng.integers(1, 4)))
        return FeedbackRecord("env-diagnostic", toks)

    def params(self, kind="tabular", contexts=()):
        p = PolicyParams(self.vocab, kind, max_len=self.env.response_len)
        if kind == "linear-softmax":
            p.weights = self.rng.normal(scale=0.5, size=p.weights.shape)
        return p

    def fill(self, p, ctx, y):
        """Random logits on every prefix of ``y`` at ``ctx``."""
        if p.kind != "tabular":
            return
        for t in range(len(y)):
            k = p.key(ctx.extend(y[:t]))
            if k not in p.table:
                p.table[k] = self.rng.normal(size=self.vocab.n_out)

    def trajectory(self, p, group_id=0, idx=0, reward=None):
        x, y = self.prompt(), self.response()
        self.fill(p, Context(x), y)
        lps = token_logprobs(p, Context(x), y)
        r = int(self.rng.integers(0, 2)) if reward is None else reward
        return Trajectory(x, y, tuple(lps), float(np.sum(lps)), r, None, group_id, idx)


def gradient_checks(env: EnvSpec, n: int = 50, seed: int = 0, beta: float = 0.1):
    """Finite-difference checks of every analytic gradient in the package."""
    gen = _Instances(env, seed)
    results = []

    def run(name, make):
        t0 = time.perf_counter()
        errs = [make() for _ in range(n)]
        results.append(_result(name, errs, GRAD_RTOL, t0))

    def logprob_case(kind):
        def make():
            p = gen.params(kind)
            x, y = gen.prompt(), gen.response()
            ctx = Context(x, gen.feedback().tokens if gen.rng.random() < 0.5 else None)
            gen.fill(p, ctx, y)
            return compare_grad(lambda q: sequence_logprob(q, ctx, y), p, logprob_grad(p, ctx, y))
        return make

    run("grad:logprob-tabular", logprob_case("tabular"))
    run("grad:logprob-linear", logprob_case("linear-softmax"))

    def bco_case():
        p = gen.params()
        pos, neg, frozen = [], [], {}
        for i in range(int(gen.rng.integers(1, 4)) + int(gen.rng.integers(1, 4))):
            t = gen.trajectory(p, 0, i, reward=1 if i == 0 else (0 if i == 1 else None))
            fb = gen.feedback()
            gen.fill(p, Context(t.prompt, fb.tokens), t.response)
            frozen[t.key] = t.total_logprob + gen.rng.normal()
            (pos if t.reward else neg).append((t, fb))
        batch = EStepBatch(pos, neg, frozen)
        state = EStepState(beta=beta, delta=float(gen.rng.normal(scale=0.3)))
        loss, grad = bco_loss(batch, p, state)
        return compare_grad(lambda q: bco_loss(batch, q, state)[0], p, grad)

    run("grad:bco-loss", bco_case)

    for div in DIVERGENCES:
        def distill_case(div=div):
            p = gen.params()
            t = gen.trajectory(p)
            fb = gen.feedback()
            gen.fill(p, Context(t.prompt, fb.tokens), t.response)
            cfg = DistillConfig(div)
            _, grad = distill_loss(p, t, fb, cfg)
            return _distill_fd(p, t, fb, cfg, grad)
        run(f"grad:distill-{div}", distill_case)

    clip = 0.2

    def near_old(p, trajs):
        """Old log-probs within +-5% of current so every ratio sits inside the clip band."""
        return [token_logprobs(p, Context(t.prompt), t.response) + gen.rng.uniform(-0.05, 0.05, len(t.response))
                for t in trajs]

    def grpo_case():
        p = gen.params()
        trajs = [gen.trajectory(p, 0, i) for i in range(4)]
        old = near_old(p, trajs)
        advs = gen.rng.normal(size=len(trajs))
        _, grad = clipped_surrogate(p, trajs, advs, clip, old)
        return compare_grad(lambda q: clipped_surrogate(q, trajs, advs, clip, old)[0], p, grad)

    run("grad:grpo-loss", grpo_case)

    def hybrid_setup():
        p = gen.params()
        trajs = [gen.trajectory(p, 0, i) for i in range(4)]
        items = []
        for t in trajs:
            fb = gen.feedback()
            gen.fill(p, Context(t.prompt, fb.tokens), t.response)
            t.feedback = fb
            items.append((t, fb))
        teacher = p.copy()
        return p, trajs, items, teacher

    def joint_case():
        p, trajs, items, teacher = hybrid_setup()
        h = HybridConfig(omega_rl=float(gen.rng.uniform(0.1, 1)), omega_opd=float(gen.rng.uniform(0.1, 1)))
        cfg = DistillConfig(str(gen.rng.choice(DIVERGENCES)))
        advs = gen.rng.normal(size=len(trajs))
        # fresh rollouts: old log-probs equal current, so the clip is inactive
        _, grad = hybrid_joint_loss(trajs, items, p, advs, h, cfg, teacher)
        return compare_grad(lambda q: hybrid_joint_loss(trajs, items, q, advs, h, cfg, teacher)[0], p, grad)

    run("grad:hybrid-joint", joint_case)

    def token_adv_case(mode):
        def make():
            p, trajs, items, teacher = hybrid_setup()
            h = HybridConfig()
            old = near_old(p, trajs)
            advs = []
            for t in trajs:
                a = float(gen.rng.normal())
                d = sdpo_token_advantage(t, t.feedback, p, teacher)
                if mode == "reshape":
                    advs.append(reshape_advantage(a, d, h))
                else:
                    advs.append(np.array([reweight_advantage(a, dt, 0.7, h.reweight_clip) for dt in d]))
            _, grad = clipped_surrogate(p, trajs, advs, h.ppo_clip, old)
            return compare_grad(lambda q: clipped_surrogate(q, trajs, advs, h.ppo_clip, old)[0], p, grad)
        return make

    run("grad:hybrid-reshape", token_adv_case("reshape"))
    run("grad:hybrid-reweight", token_adv_case("reweight"))
    return results


def _distill_fd(p, t, fb, cfg, grad):
    """FD over student rows only, with the teacher held at its unperturbed values."""
    teacher = p.copy()
    return compare_grad(lambda q: distill_loss(q, t, fb, cfg, teacher_params=teacher)[0], p, grad)


def run_suite(env: EnvSpec, beta: float, n_identity: int = 100, n_grad: int = 50, seed: int = 0,
              corrupt: str | None = None, cap: int = oracle.DEFAULT_CAP):
    """Every identity, the bound sweep, optimality and gradient checks."""
    if env.vocab.n_out ** env.response_len > cap:
        raise EnumerationCapExceeded(
            f"oracle-check refused: {env.vocab.n_out}^{env.response_len} responses exceed "
            f"the enumeration cap of {cap}"
        )
    out = identity_suite(env, beta, n_identity, seed, corrupt)
    out.append(optimality_check(beta=beta, seed=seed, vocab_size=env.vocab_size,
                                length=env.response_len))
    out.append(bco_bound_check(seed=seed))
    out.extend(gradient_checks(env, n_grad, seed, beta))
    return out
