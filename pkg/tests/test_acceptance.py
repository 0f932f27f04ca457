"""Acceptance suite: one test per release criterion, each printing a
PASS/FAIL line with its measured runtime (run with -s to see them live).

The statistical experiments run at their full seed counts, so this module
is the slow part of the suite (several minutes total).
"""

import time

import numpy as np
import pytest

from kurtail.linalg import (
    OrthogonalMatrix,
    hadamard_dense,
    fast_hadamard_transform,
    orthogonality_defect,
    qr_orthogonalize,
    random_orthogonal,
    randomized_hadamard,
)
from kurtail.manifold import CayleyState, cayley_adam_step, cayley_retract, skew_project
from kurtail.gptq import HessianEstimate, gptq_quantize, proxy_loss
from kurtail.pipeline import RunConfig, run_end_to_end, run_sensitivity_experiment
from kurtail.quant import dequantize, rtn_quantize_weights, sensitivity
from kurtail.rotor import (
    ActivationSet,
    ProxyNet,
    TrainConfig,
    proxy_backward,
    proxy_forward,
    train_r1,
)
from kurtail.stats import kurtosis, kurtosis_gradient
from kurtail.toyformer import (
    ModelConfig,
    OnlineModes,
    RotationSet,
    fold_rmsnorm,
    forward,
    fuse_rotations,
    invariance_report,
    random_model,
    success_rate,
)

# success rates reported for full-scale LLMs, recorded for context only;
# desk-scale assertions use the >= 95% synthetic target
LLM_SCALE_SUCCESS_MHSA = 99.74
LLM_SCALE_SUCCESS_FFN = 99.96


def report(name: str, passed: bool, detail: str, elapsed: float, limit: float):
    state = "PASS" if passed else "FAIL"
    print(f"[{state}] {name}: {detail} ({elapsed:.1f}s / limit {limit:.0f}s)")
    assert passed, f"{name}: {detail}"
    assert elapsed < limit, f"{name}: runtime {elapsed:.1f}s exceeded {limit:.0f}s"


def blocked_rotation(cfg: ModelConfig, seed: int) -> OrthogonalMatrix:
    head = random_orthogonal(cfg.head_dim, seed)
    return OrthogonalMatrix(np.kron(np.eye(cfg.n_heads), head.q))


def outlier_acts(seed, tokens=1024, dim=16, n_layers=1, scale=50.0):
    rng = np.random.default_rng(seed)
    acts = ActivationSet(d_model=dim, n_heads=4)
    cols = rng.choice(dim, size=2, replace=False)
    for layer in range(n_layers):
        for kind in ("mhsa_input", "ffn_input"):
            x = rng.standard_normal((tokens, dim))
            x[:, cols] *= scale
            acts.add(layer, kind, x)
    return acts


def test_orthogonality_suite():
    t0 = time.time()
    worst = 0.0
    # constructed
    for q in (
        qr_orthogonalize(np.random.default_rng(0).standard_normal((48, 48))),
        random_orthogonal(64, 1),
        randomized_hadamard(128, 2),
    ):
        worst = max(worst, q.defect)
    # learned
    res = train_r1(outlier_acts(0), TrainConfig(iterations=10, batch_groups=2,
                                                batch_tokens=256, eval_tokens=256, seed=0))
    worst = max(worst, orthogonality_defect(res.rotation.q))
    # retracted, 1000-step drift
    rng = np.random.default_rng(3)
    w = random_orthogonal(16, 4)
    state = CayleyState(lr=0.02)
    for _ in range(1000):
        w = cayley_adam_step(w, rng.standard_normal((16, 16)), state)
    worst = max(worst, orthogonality_defect(w.q))
    report("orthogonality-suite", worst <= 1e-6,
           f"max defect {worst:.2e} <= 1e-6 over constructed/learned/1000-step-retracted",
           time.time() - t0, 10.0)


def test_computational_invariance():
    t0 = time.time()
    worst = 0.0
    cases = [
        (ModelConfig(64, 2, 256, 2, vocab_size=None), 7),
        (ModelConfig(128, 4, 512, 3, vocab_size=None), 7),
        (ModelConfig(256, 4, 1024, 4, vocab_size=None), 7),
    ]
    for idx, (cfg, n_inputs) in enumerate(cases):
        model = fold_rmsnorm(random_model(cfg, seed=10 + idx))
        rot = RotationSet(
            r1=random_orthogonal(cfg.d_model, 20 + idx),
            r2=tuple(blocked_rotation(cfg, 30 + idx * 10 + i) for i in range(cfg.n_layers)),
            online=OnlineModes(r3=None, r4=40 + idx, r5=50 + idx),
        )
        fused = fuse_rotations(model, rot)
        rng = np.random.default_rng(60 + idx)
        inputs = [rng.standard_normal((24, cfg.d_model)) for _ in range(n_inputs)]
        worst = max(worst, invariance_report(model, fused, inputs))
    report("computational-invariance", worst <= 1e-6,
           f"max relative deviation {worst:.2e} <= 1e-6 over 21 inputs, up to d=256 x 4 layers",
           time.time() - t0, 30.0)


def test_r3_cancellation():
    t0 = time.time()
    cfg = ModelConfig(64, 4, 256, 3, vocab_size=None)
    model = fold_rmsnorm(random_model(cfg, seed=70))
    rng = np.random.default_rng(71)
    worst = 0.0
    for _ in range(5):
        x = rng.standard_normal((16, cfg.d_model))
        plain = forward(model, x)
        rotated = forward(model, x, online=OnlineModes(r3=72))
        worst = max(worst, float(np.max(np.abs(rotated - plain) / (np.abs(plain) + 1e-9))))
    report("r3-cancellation", worst <= 1e-8,
           f"max relative deviation {worst:.2e} <= 1e-8 with online query/key rotation",
           time.time() - t0, 10.0)


def test_gradient_correctness():
    t0 = time.time()
    worst = 0.0
    rng = np.random.default_rng(80)
    # 60 kurtosis-gradient instances
    for _ in range(60):
        x = rng.standard_normal(32) * rng.uniform(0.5, 2.0)
        h = 1e-5 * max(np.max(np.abs(x)), 1.0)
        fd = np.zeros_like(x)
        for i in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[i] += h
            xm[i] -= h
            fd[i] = (kurtosis(xp).kappa - kurtosis(xm).kappa) / (2 * h)
        err = np.max(np.abs(kurtosis_gradient(x) - fd)) / max(np.max(np.abs(fd)), 1e-10)
        worst = max(worst, err)
    # 40 proxy-backward instances over dims {4, 8, 16}
    for k in range(40):
        dim = (4, 8, 16)[k % 3]
        use_norm = k % 2 == 0
        x = rng.standard_normal((12, dim))
        w = rng.standard_normal((12, dim))
        net = ProxyNet(random_orthogonal(dim, 100 + k), use_rmsnorm=use_norm)
        analytic = proxy_backward(x, net, w)
        h = 1e-6
        fd = np.zeros((dim, dim))
        r0 = net.rotation.q
        for i in range(dim):
            for j in range(dim):
                rp, rm = r0.copy(), r0.copy()
                rp[i, j] += h
                rm[i, j] -= h
                zp = x @ rp
                zm = x @ rm
                if use_norm:
                    zp = zp / np.sqrt(np.mean(zp * zp, axis=1, keepdims=True) + 1e-6)
                    zm = zm / np.sqrt(np.mean(zm * zm, axis=1, keepdims=True) + 1e-6)
                fd[i, j] = (np.sum(w * zp) - np.sum(w * zm)) / (2 * h)
        err = np.max(np.abs(analytic - fd)) / max(np.max(np.abs(fd)), 1e-10)
        worst = max(worst, err)
    report("gradient-correctness", worst <= 1e-4,
           f"max relative error vs central differences {worst:.2e} <= 1e-4 over 100 instances",
           time.time() - t0, 10.0)


def test_uniform_beats_normal_robustness():
    t0 = time.time()
    alphas = (0.7, 0.8, 0.9, 1.0, 1.1, 1.2)
    n = 100_000
    sums_u = np.zeros(len(alphas))
    sums_n = np.zeros(len(alphas))
    for seed in range(50):
        rng = np.random.default_rng(9000 + seed)
        sums_u += sensitivity(rng.uniform(-1.0, 1.0, n), 4, alphas).gamma
        sums_n += sensitivity(rng.standard_normal(n), 4, alphas).gamma
    ok = all(su < sn for a, su, sn in zip(alphas, sums_u, sums_n) if a != 1.0)
    margins = [f"{a}:{su / sn:.2f}" for a, su, sn in zip(alphas, sums_u, sums_n) if a != 1.0]
    report("uniform-vs-normal-robustness", ok,
           f"mean Gamma(uniform)/Gamma(normal) over 50 seeds, n=1e5: {' '.join(margins)} (all < 1)",
           time.time() - t0, 60.0)


def test_sensitivity_ordering():
    t0 = time.time()
    passes = 0
    for seed in range(50):
        cfg = RunConfig(
            d_model=32, n_heads=2, d_ff=64, n_layers=2, vocab_size=64,
            planted_outliers=True, outlier_site="embed", outlier_scale=8.0,
            n_outlier_channels=4, embed_structure="mixed_sources",
            samples=20, sequence_length=64,
            train_iterations=150, batch_groups=4, batch_tokens=1024, eval_tokens=1024,
            train_init="hadamard", seed=seed,
        )
        rows = run_sensitivity_experiment(cfg, alphas=(0.8, 1.0, 1.2))
        g = {}
        for cond in ("vanilla", "hadamard", "kurtail"):
            for a in (0.8, 1.2):
                g[(cond, a)] = np.mean(
                    [r["gamma"] for r in rows if r["condition"] == cond and r["alpha"] == a]
                )
        passes += all(
            g[("kurtail", a)] <= g[("hadamard", a)] <= g[("vanilla", a)] for a in (0.8, 1.2)
        )
    report("sensitivity-ordering", passes >= 40,
           f"kurtail <= hadamard <= vanilla at alpha 0.8 and 1.2 in {passes}/50 seeds (need >= 40)",
           time.time() - t0, 300.0)


def test_kurtosis_reduction():
    t0 = time.time()
    reduced = 0
    non_increase = 0
    for seed in range(100):
        acts = outlier_acts(seed, tokens=1024, dim=16, n_layers=1)
        cfg = TrainConfig(iterations=15, batch_groups=2, batch_tokens=256,
                          eval_tokens=512, seed=seed, lr=0.05)
        res = train_r1(acts, cfg)
        pooled = np.vstack([m for _, _, m in acts.groups(("mhsa_input", "ffn_input"))])
        before = kurtosis(
            proxy_forward(pooled, ProxyNet(OrthogonalMatrix(np.eye(16)))).ravel()
        ).kappa
        after = kurtosis(proxy_forward(pooled, ProxyNet(res.rotation)).ravel()).kappa
        reduced += after < before
        non_increase += res.losses[res.best_iteration] <= res.losses[0]
    report("kurtosis-reduction", reduced >= 95 and non_increase == 100,
           f"kurtosis lowered in {reduced}/100 seeds (need >= 95); "
           f"final loss <= initial in {non_increase}/100 (need 100)",
           time.time() - t0, 300.0)


def test_success_rate_analogue():
    t0 = time.time()
    worst = 100.0
    for seed in range(3):
        cfg = RunConfig(
            d_model=32, n_heads=2, d_ff=64, n_layers=2, vocab_size=64,
            planted_outliers=True, outlier_site="both", outlier_scale=50.0,
            samples=8, sequence_length=48,
            train_iterations=30, batch_groups=4, batch_tokens=512, eval_tokens=1024,
            train_init="hadamard", eval_samples=8, seed=seed,
        )
        summary = run_end_to_end(cfg, write_files=False)
        rates = summary["metrics"]["success_rate"]
        worst = min(worst, rates["mhsa_input"], rates["ffn_input"])
    report("success-rate-analogue", worst >= 95.0,
           f"worst per-block success rate {worst:.2f}% >= 95% over 3 planted-outlier models "
           f"(LLM-scale anchors: {LLM_SCALE_SUCCESS_MHSA}% MHSA / {LLM_SCALE_SUCCESS_FFN}% FFN, recorded not asserted)",
           time.time() - t0, 60.0)


def test_quantized_output_improvement():
    t0 = time.time()
    wins = 0
    learned, random_rot, unrotated = [], [], []
    for seed in range(50):
        base = dict(
            d_model=32, n_heads=2, d_ff=64, n_layers=2, vocab_size=64,
            planted_outliers=True, outlier_site="embed", outlier_scale=6.0,
            embed_structure="uniform_sources",
            samples=8, sequence_length=48,
            train_iterations=200, batch_groups=4, batch_tokens=1024, eval_tokens=2048,
            train_init="hadamard", eval_samples=24, seed=seed, weight_method="rtn",
        )
        kt = run_end_to_end(RunConfig(**base, r1_mode="train", r2_mode="train"),
                            write_files=False)
        hd = run_end_to_end(RunConfig(**base, r1_mode="hadamard", r2_mode="hadamard"),
                            write_files=False)
        learned.append(kt["metrics"]["quantized_output_mse"]["rotated"])
        random_rot.append(hd["metrics"]["quantized_output_mse"]["rotated"])
        unrotated.append(kt["metrics"]["quantized_output_mse"]["unrotated"])
        wins += learned[-1] <= random_rot[-1]
    medians_ordered = (
        np.median(learned) < np.median(random_rot) < np.median(unrotated)
    )
    report("quantized-output-improvement", wins >= 40 and medians_ordered,
           f"learned rotation beat random Hadamard on 4-bit output MSE in {wins}/50 seeds "
           f"(need >= 40); medians {np.median(learned):.4f} < {np.median(random_rot):.4f} "
           f"< {np.median(unrotated):.4f} strictly ordered: {medians_ordered}",
           time.time() - t0, 600.0)


def test_gptq_correctness():
    t0 = time.time()
    rng = np.random.default_rng(95)
    w = rng.standard_normal((16, 12))
    ident = gptq_quantize(w, HessianEstimate(np.eye(16), 1, 0.0), bits=4)
    ref = rtn_quantize_weights(w, 4)
    exact = np.array_equal(ident.codes, ref.codes) and np.array_equal(ident.scale, ref.scale)
    wins = 0
    for _ in range(100):
        w = rng.standard_normal((16, 16))
        base = rng.standard_normal((16, 32))
        mix = np.eye(16) * 0.1 + 0.9 * np.ones((16, 16)) / 16
        x = (mix @ base).T
        h = (2.0 / x.shape[0]) * x.T @ x
        h += 0.01 * np.mean(np.diag(h)) * np.eye(16)
        hest = HessianEstimate(h=h, sample_count=x.shape[0], damping=0.01)
        lg = proxy_loss(w, dequantize(gptq_quantize(w, hest, 4)), hest)
        lr = proxy_loss(w, dequantize(rtn_quantize_weights(w, 4)), hest)
        wins += lg <= lr + 1e-12
    report("gptq-correctness", exact and wins >= 95,
           f"identity-Hessian == RTN bitwise: {exact}; proxy-loss wins {wins}/100 (need >= 95)",
           time.time() - t0, 30.0)


def test_fast_hadamard_and_cayley_closed_form():
    t0 = time.time()
    worst = 0.0
    n = 2
    while n <= 4096:
        rng = np.random.default_rng(n)
        x = rng.standard_normal(n)
        dense = hadamard_dense(n) @ x
        worst = max(worst, float(np.max(np.abs(fast_hadamard_transform(x) - dense))))
        n *= 2
    cayley_worst = 0.0
    for theta in (0.2, 0.9, -1.4):
        a = np.array([[0.0, theta], [-theta, 0.0]])
        out = cayley_retract(OrthogonalMatrix(np.eye(2)), a, 1.0)
        phi = 2.0 * np.arctan(theta / 2.0)
        expected = np.array([[np.cos(phi), np.sin(phi)], [-np.sin(phi), np.cos(phi)]])
        cayley_worst = max(cayley_worst, float(np.max(np.abs(out.q - expected))))
    report("fht-and-cayley-closed-form", worst <= 1e-10 and cayley_worst <= 1e-12,
           f"fht vs dense max {worst:.2e} <= 1e-10 up to n=4096; 2x2 Cayley vs closed form {cayley_worst:.2e}",
           time.time() - t0, 10.0)


def test_pipeline_determinism(tmp_path):
    t0 = time.time()
    cfg = RunConfig(
        d_model=32, n_heads=2, d_ff=64, n_layers=2, vocab_size=64,
        samples=6, sequence_length=24, train_iterations=6, batch_groups=4,
        batch_tokens=128, eval_tokens=256, eval_samples=3, seed=11,
        output_dir=str(tmp_path / "run"),
    )

    def snapshot():
        run_end_to_end(cfg)
        root = tmp_path / "run"
        files = {"summary.json": (root / "summary.json").read_bytes()}
        for p in sorted((root / "acts").glob("*.ktac")):
            files[p.name] = p.read_bytes()
        return files

    first = snapshot()
    import shutil

    shutil.rmtree(tmp_path / "run")
    second = snapshot()
    same = first.keys() == second.keys() and all(first[k] == second[k] for k in first)
    report("pipeline-determinism", same,
           f"two runs with the same seed: {len(first)} files byte-identical",
           time.time() - t0, 120.0)
