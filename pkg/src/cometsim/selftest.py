"""Built-in gradient checks and loss oracles, run by ``cometsim selftest``."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .losses import ContrastiveLayout, build_layout, contrastive_loss, entropy_loss, total_loss
from .model import ComposedModel, NetworkConfig, StudentTeacherPair, ema_update, forward_features, forward_probs
from .prototypes import PrototypeBank
from .pseudo import UNCERTAIN, PseudoThresholds, assign_pseudo_labels, normalized_entropy

GRAD_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-8


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def reference_contrastive_loss(z: np.ndarray, labels, num_known_rows: int, tau: float) -> float:
    """Loop-by-loop evaluation of the contrastive loss, for cross-checking."""
    zn = [np.asarray(v, dtype=np.float64) / np.linalg.norm(v) for v in z]
    known = range(num_known_rows)
    unknown = range(num_known_rows, len(zn))

    def sim(a, b):
        return float(zn[a] @ zn[b]) / tau

    cross = 0.0
    for u in unknown:
        for j in known:
            cross += math.exp(sim(u, j))
    total = 0.0
    for i in known:
        positives = [p for p in known if p != i and labels[p] == labels[i]]
        if not positives:
            continue
        denom = cross
        for a in known:
            if a != i:
                denom += math.exp(sim(i, a))
        inner = 0.0
        for p in positives:
            inner += math.log(math.exp(sim(i, p)) / denom)
        total += -inner / len(positives)
    return total


def random_layout(rng: np.random.Generator, max_known: int = 4, max_unknown: int = 3, dim: int = 3, num_classes: int = 2):
    """Random raw projections for up to ``max_known`` known samples and ``max_unknown`` unknown ones.

    Known samples contribute a sample row, an augmentation row and, when
    drawn, a prototype row, mirroring ``build_layout``.
    """
    nk = int(rng.integers(0, max_known + 1))
    nu = int(rng.integers(0, max_unknown + 1))
    k_labels = rng.integers(num_classes, size=nk)
    with_proto = rng.random(nk) < 0.7
    labels = np.concatenate([k_labels, k_labels, k_labels[with_proto]]).astype(np.int64)
    rows_k = len(labels)
    labels = np.concatenate([labels, np.full(2 * nu, num_classes)]).astype(np.int64)
    z = rng.normal(size=(len(labels), dim))
    return ContrastiveLayout(nx.Tensor(z), labels, rows_k, float(rng.uniform(0.05, 1.0)), nk, nu)


def _small_problem(seed: int):
    rng = np.random.default_rng([seed, 31])
    k = int(rng.integers(2, 5))
    config = NetworkConfig(
        input_dim=int(rng.integers(2, 5)),
        num_known_classes=k,
        feature_dim=int(rng.integers(3, 6)),
        projection_dim=int(rng.integers(2, 5)),
        g_hidden=(int(rng.integers(3, 7)),),
        proj_hidden=int(rng.integers(3, 6)),
    )
    params = ComposedModel.initialize(config, rng).params
    # Nonzero biases keep every row away from ReLU dead zones and zero projections.
    for name in ("g.b1", "g.b2", "proj.b1", "proj.b2"):
        params[name] = rng.uniform(0.2, 0.5, size=params[name].shape)
    n = int(rng.integers(4, 9))
    x = rng.normal(size=(n, config.input_dim))
    x_aug = x + 0.1 * rng.normal(size=x.shape)
    pseudo = rng.integers(-1, k + 1, size=n)
    pseudo[0], pseudo[1] = 0, 0
    pseudo[2] = k
    bank = PrototypeBank("P", rng.normal(size=(k, config.feature_dim)), np.ones(k, dtype=np.int64))
    bank.counts[k - 1] = 0
    bank.sums[k - 1] = 0.0
    return params, x, x_aug, pseudo, bank, float(rng.uniform(0.1, 1.0))


def loss_functions(seed: int):
    """Closures computing L_c, L_e and L on a random small network and batch."""
    params, x, x_aug, pseudo, bank, lam = _small_problem(seed)
    tau = 0.1

    def l_c(p):
        return contrastive_loss(build_layout(p, x, x_aug, pseudo, bank, tau))

    def l_e(p):
        return entropy_loss(forward_probs(p, forward_features(p, x)), pseudo)

    def l_total(p):
        return total_loss(l_c(p), l_e(p), lam)

    return params, {"L_c": l_c, "L_e": l_e, "L": l_total}


def check_gradients(seeds=range(10), tolerance: float = GRAD_TOLERANCE) -> list[CheckResult]:
    results = []
    for seed in seeds:
        params, fns = loss_functions(seed)
        for name, fn in fns.items():
            report = nx.finite_difference_check(fn, params, step=1e-5, max_coords=64, seed=seed)
            results.append(
                CheckResult(f"grad {name} seed={seed}", report.max_rel_error < tolerance, f"max rel err {report.max_rel_error:.2e}")
            )
    return results


def check_contrastive_oracle(trials: int = 100, tolerance: float = ORACLE_TOLERANCE) -> list[CheckResult]:
    rng = np.random.default_rng(7)
    worst = 0.0
    for _ in range(trials):
        layout = random_layout(rng)
        got = float(contrastive_loss(layout).data)
        want = reference_contrastive_loss(layout.z.data, layout.labels, layout.num_known_rows, layout.tau)
        worst = max(worst, abs(got - want))
    unit = np.ones((3, 4)) / 2.0
    hand = float(contrastive_loss(ContrastiveLayout(nx.Tensor(unit), np.zeros(3, dtype=np.int64), 3, 0.1, 1, 0)).data)
    hand_err = abs(hand - 3 * math.log(2))
    return [
        CheckResult("contrastive oracle", worst < tolerance, f"{trials} layouts, max abs diff {worst:.2e}"),
        CheckResult("contrastive hand case 3 ln 2", hand_err < 1e-9, f"abs err {hand_err:.2e}"),
    ]


def check_pseudo_labels() -> list[CheckResult]:
    k = 4
    uniform = normalized_entropy(np.full(k, 1.0 / k))
    onehot = normalized_entropy(np.eye(k)[0])
    # Thresholds placed exactly on two rows' entropies exercise both boundaries.
    probs = np.array([[1.0, 0.0], [0.95, 0.05], [0.8, 0.2], [0.4, 0.6]])
    ent = normalized_entropy(probs)
    labels = assign_pseudo_labels(probs, PseudoThresholds(float(ent[1]), float(ent[3])))
    expected = [0, 0, UNCERTAIN, 2]
    return [
        CheckResult("entropy uniform = 1", uniform == 1.0, f"got {uniform!r}"),
        CheckResult("entropy one-hot = 0", onehot == 0.0, f"got {onehot!r}"),
        CheckResult("pseudo-label threshold boundaries", labels.tolist() == expected, f"got {labels.tolist()}"),
    ]


def check_ema(alpha: float = 0.999) -> list[CheckResult]:
    config = NetworkConfig(input_dim=2, num_known_classes=2, feature_dim=2, projection_dim=2, g_hidden=(), proj_hidden=2)
    rng = np.random.default_rng(3)
    teacher = ComposedModel.initialize(config, rng)
    student = ComposedModel.initialize(config, rng)
    pair = StudentTeacherPair(student, teacher.copy(), alpha)
    worst, t = 0.0, 0
    for target in (1, 10, 1000):
        while t < target:
            ema_update(pair)
            t += 1
        a = alpha**t
        for name, w0 in teacher.params.items():
            expect = a * w0 + (1 - a) * student.params[name]
            worst = max(worst, float(np.max(np.abs(pair.teacher.params[name] - expect))))
    return [CheckResult("EMA closed form", worst < 1e-10, f"max abs err {worst:.2e}")]


def run_selftest(grad_seeds=range(10)) -> list[CheckResult]:
    return check_gradients(grad_seeds) + check_contrastive_oracle() + check_pseudo_labels() + check_ema()
