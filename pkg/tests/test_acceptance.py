"""The ten acceptance criteria, one test each, with pinned tolerances.

These run the full desk-scale protocol (dataset generation, suite training,
three seed triples, parameter sweeps), so this file dominates the wall-clock
time of the test run. Every numeric bound below is stated next to its
assertion; a summary line per criterion is printed after the run.
"""

import time

import numpy as np
import pytest
from conftest import record_criterion

from fsalab.attack_engine import AttackConfig, clip_eps, fsa_attack, mi_fgsm_attack
from fsalab.ham import HamParams, augment
from fsalab.harness import (
    SOURCE_ID,
    TARGET_IDS,
    ExperimentSpec,
    ablation_sweep,
    build_model_suite,
    craft_adversarial,
    generate_dataset,
    report_csv_text,
    run_experiment,
)
from fsalab.hfm import HfmParams, fusion_weights, hfm_apply
from fsalab.models import (
    ARCHITECTURES,
    init_model,
    load_model,
    loss_and_gradient,
    loss_and_gradient_batch,
    predict,
    save_model,
)
from fsalab.numerics import RandomStream, downsample2, fft2, gaussian_blur, ifft2, upsample_bilinear
from fsalab.serial import FileFormatError, load_dataset, save_dataset

EPS = 16 / 255
DATA_SEED, SEED_A, SEED_B, MASTER = 101, 1001, 2002, 777
TRIPLES = ((101, 1001, 2002), (202, 1313, 2424), (303, 1515, 2626))
ARMS = ("mi_fgsm", "ham", "hfm", "fsa")
GATE_TARGETS = ("cnn_wide_b", "cnn_small_c", "linear_softmax")


def _check(number: int, ok: bool, detail: str) -> None:
    record_criterion(number, bool(ok), detail)
    assert ok, f"criterion {number}: {detail}"


# ---------------------------------------------------------------------------
# shared heavy artifacts
# ---------------------------------------------------------------------------


@pytest.fixture(scope="session")
def acceptance_data():
    return generate_dataset(seed=DATA_SEED)


@pytest.fixture(scope="session")
def acceptance_suite(acceptance_data):
    return build_model_suite(acceptance_data, seed_a=SEED_A, seed_b=SEED_B, learning_rate=0.02)


@pytest.fixture(scope="session")
def whitebox_runs(acceptance_data, acceptance_suite):
    """MI-FGSM and the full attack at defaults over the whole eval set."""
    images, labels = acceptance_data.eval_set()
    cfg = AttackConfig(master_seed=MASTER)
    runs = {}
    for attack in ("mi_fgsm", "fsa"):
        started = time.perf_counter()
        advs = craft_adversarial(acceptance_suite[SOURCE_ID], attack, images, labels, cfg)
        runs[attack] = (advs, time.perf_counter() - started)
    return {"images": images, "labels": labels, "runs": runs}


@pytest.fixture(scope="session")
def transfer_protocol(acceptance_data, acceptance_suite):
    """Four attack arms on every target, averaged over three seed triples."""
    started = time.perf_counter()
    sums = {(arm, target): 0.0 for arm in ARMS for target in TARGET_IDS}
    for data_seed, seed_a, seed_b in TRIPLES:
        if data_seed == DATA_SEED:
            data, suite = acceptance_data, acceptance_suite
        else:
            data = generate_dataset(seed=data_seed)
            suite = build_model_suite(data, seed_a=seed_a, seed_b=seed_b, learning_rate=0.02)
        spec = ExperimentSpec(
            sources=(SOURCE_ID,),
            targets=TARGET_IDS,
            attacks=ARMS,
            config=AttackConfig(master_seed=MASTER),
        )
        report = run_experiment(spec, suite, data)
        for arm in ARMS:
            for target in TARGET_IDS:
                sums[(arm, target)] += report.asr(SOURCE_ID, arm, target)
    avgs = {key: value / len(TRIPLES) for key, value in sums.items()}
    return avgs, time.perf_counter() - started


@pytest.fixture(scope="session")
def sweep_curves(acceptance_data, acceptance_suite):
    """Attack-strength curves vs copies, blur kernel, and noise scale, with
    paired seeds; the reported value is the mean ASR over the three
    normally-trained black-box targets."""
    models = {name: acceptance_suite[name] for name in (SOURCE_ID,) + GATE_TARGETS}
    spec = ExperimentSpec(
        sources=(SOURCE_ID,),
        targets=GATE_TARGETS,
        attacks=("fsa",),
        config=AttackConfig(master_seed=MASTER),
    )
    started = time.perf_counter()
    curves = {}
    for param, values in (("N", [1, 4, 8, 20, 32]), ("kernel", [3, 5, 7, 9, 11]),
                          ("sigma", [1.0, 2.0, 3.0, 4.0])):
        rows = ablation_sweep(spec, param, values, models, acceptance_data)
        by_value = {}
        for row in rows:
            by_value.setdefault(row["param_value"], []).append(row["asr"])
        curves[param] = {value: float(np.mean(by_value[value])) for value in values}
    return curves, time.perf_counter() - started


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------


def _naive_dft2(plane: np.ndarray) -> np.ndarray:
    h, w = plane.shape
    out = np.zeros((h, w), dtype=np.complex128)
    rows, cols = np.arange(h)[:, None], np.arange(w)[None, :]
    for u in range(h):
        for v in range(w):
            phase = np.exp(-2j * np.pi * (u * rows / h + v * cols / w))
            out[u, v] = np.sum(plane * phase)
    return out


def test_criterion_01_numerics_oracle():
    started = time.perf_counter()
    gen = np.random.default_rng(2026)
    sizes = [(4, 4), (8, 8), (16, 16), (5, 7), (3, 16), (12, 10), (9, 9), (16, 6), (7, 12), (11, 5)]
    worst_dft = 0.0
    for i in range(20):  # 20 random planes, sizes up to 16x16
        h, w = sizes[i % len(sizes)]
        plane = gen.uniform(-1.0, 1.0, (h, w))
        worst_dft = max(worst_dft, float(np.max(np.abs(fft2(plane) - _naive_dft2(plane)))))
    worst_parseval = 0.0
    for _ in range(20):
        plane = gen.uniform(-1.0, 1.0, (12, 14))
        energy = float(np.sum(plane**2))
        spectral = float(np.sum(np.abs(fft2(plane)) ** 2)) / plane.size
        worst_parseval = max(worst_parseval, abs(energy - spectral) / energy)
    worst_linear = 0.0
    for _ in range(5):
        x, y = gen.normal(size=(2, 16, 16))
        a, b = gen.uniform(-2, 2, 2)
        for op in (
            lambda p: gaussian_blur(p, 3, 1.0),
            downsample2,
            lambda p: upsample_bilinear(p, 24, 24),
        ):
            diff = op(a * x + b * y) - (a * op(x) + b * op(y))
            worst_linear = max(worst_linear, float(np.max(np.abs(diff))))
    elapsed = time.perf_counter() - started
    ok = worst_dft <= 1e-10 and worst_parseval <= 1e-10 and worst_linear <= 1e-9 and elapsed < 10
    _check(1, ok, f"dft err {worst_dft:.2e} (<=1e-10), parseval rel {worst_parseval:.2e} "
                  f"(<=1e-10), linearity {worst_linear:.2e} (<=1e-9), {elapsed:.1f}s (<10s)")


def test_criterion_02_gradient_fidelity():
    # The victims are piecewise linear (relu/maxpool), so a central quotient
    # that straddles a kink is not a derivative estimate. Coordinates failing
    # centrally must match one of the two one-sided slopes instead (the
    # analytic gradient lives on one branch); a wrong gradient matches neither.
    started = time.perf_counter()
    gen = np.random.default_rng(7)
    h_step = 1e-4
    worst_central, worst_sided, kink_coords, all_ok = 0.0, 0.0, 0, True
    for arch in ARCHITECTURES:
        model = init_model(arch, (16, 16, 3), num_classes=4, seed=11)
        for _ in range(5):  # 5 random inputs x 200 coordinates each
            x = gen.uniform(0.0, 1.0, (16, 16, 3))
            y = int(gen.integers(4))
            center_loss, analytic = loss_and_gradient(model, x, y)
            coords = gen.choice(x.size, size=200, replace=False)
            perturbed = np.repeat(x[None], 400, axis=0)
            flat = perturbed.reshape(400, -1)
            flat[0::2, :][np.arange(200), coords] += h_step
            flat[1::2, :][np.arange(200), coords] -= h_step
            losses, _ = loss_and_gradient_batch(model, perturbed, [y] * 400)
            fd = (losses[0::2] - losses[1::2]) / (2 * h_step)
            sampled = analytic.reshape(-1)[coords]
            scale = max(float(np.max(np.abs(fd))), 1e-12)
            rel = np.abs(sampled - fd) / scale
            bad = rel > 1e-4
            worst_central = max(worst_central, float(rel[~bad].max()) if (~bad).any() else 0.0)
            if bad.any():
                kink_coords += int(bad.sum())
                fd_plus = (losses[0::2][bad] - center_loss) / h_step
                fd_minus = (center_loss - losses[1::2][bad]) / h_step
                sided = np.minimum(np.abs(sampled[bad] - fd_plus), np.abs(sampled[bad] - fd_minus)) / scale
                worst_sided = max(worst_sided, float(sided.max()))
                all_ok = all_ok and bool(np.all(sided <= 1e-4))
    elapsed = time.perf_counter() - started
    ok = all_ok and worst_central <= 1e-4 and elapsed < 60
    _check(2, ok, f"central rel err {worst_central:.2e} (<=1e-4) on {3000 - kink_coords}/3000 coords; "
                  f"{kink_coords} kink-straddling coords matched a one-sided slope within "
                  f"{worst_sided:.2e} (<=1e-4); {elapsed:.1f}s (<60s)")


def test_criterion_03_augmentation_identity_and_realness():
    gen = np.random.default_rng(15)
    identity_params = HamParams(sigma=0.0, rho=0.0)
    worst_identity, worst_residual = 0.0, 0.0
    for i in range(50):
        x = gen.uniform(0.0, 1.0, (16, 16, 3))
        plain = augment(x, identity_params, EPS, RandomStream(3).child(i))
        worst_identity = max(worst_identity, float(np.max(np.abs(plain - x))))
        _, residual = augment(x, HamParams(), EPS, RandomStream(4).child(i), with_residual=True)
        worst_residual = max(worst_residual, residual)
    ok = worst_identity <= 1e-6 and worst_residual < 1e-6
    _check(3, ok, f"sigma=rho=0 identity err {worst_identity:.2e} (<=1e-6), "
                  f"imaginary residual {worst_residual:.2e} (<1e-6) on 50 images")


def test_criterion_04_fusion_weight_algebra():
    gen = np.random.default_rng(23)
    ok_sum = ok_incr = True
    for _ in range(20):
        params = HfmParams(levels=int(gen.integers(2, 9)), beta=float(gen.uniform(0.05, 0.95)))
        weights = fusion_weights(params)
        ok_sum = ok_sum and abs(float(weights.sum()) - 1.0) <= 1e-12
        ok_incr = ok_incr and bool(np.all(np.diff(weights) > 0))
    pinned = np.array([0.12185, 0.15231, 0.19039, 0.23798, 0.29748])
    pin_err = float(np.max(np.abs(fusion_weights(HfmParams(levels=5, beta=0.8)) - pinned)))
    g1, g2 = gen.normal(size=(2, 32, 32, 3))
    a, b = 1.7, -0.6
    params = HfmParams()
    superpos = float(np.max(np.abs(
        hfm_apply(a * g1 + b * g2, params) - (a * hfm_apply(g1, params) + b * hfm_apply(g2, params))
    )))
    ok = ok_sum and ok_incr and pin_err <= 1e-5 and superpos <= 1e-9
    _check(4, ok, f"weight sums exact to 1e-12 and strictly increasing (20 draws), "
                  f"pinned n=5 beta=0.8 err {pin_err:.2e} (<=1e-5), superposition {superpos:.2e} (<=1e-9)")


def test_criterion_05_budget_invariants(whitebox_runs):
    images = whitebox_runs["images"]
    worst_linf, lo, hi = 0.0, 1.0, 0.0
    for advs, _ in whitebox_runs["runs"].values():
        worst_linf = max(worst_linf, float(np.max(np.abs(advs - images))))
        lo, hi = min(lo, float(advs.min())), max(hi, float(advs.max()))
    gen = np.random.default_rng(31)
    overshoot = images[0] + gen.uniform(-2 * EPS, 2 * EPS, images[0].shape)
    once = clip_eps(overshoot, images[0], EPS)
    idempotent = bool(np.array_equal(clip_eps(once, images[0], EPS), once))
    ok = worst_linf <= EPS + 1e-9 and lo >= 0.0 and hi <= 1.0 and idempotent
    _check(5, ok, f"max |delta|_inf {worst_linf:.8f} (<= {EPS:.6f}+1e-9), range [{lo:.3f},{hi:.3f}] "
                  f"in [0,1], clip idempotent={idempotent}, over {2 * len(images)} adversarial images")


def test_criterion_06_degeneration_bitwise(acceptance_data, acceptance_suite):
    model = acceptance_suite[SOURCE_ID]
    images, labels = acceptance_data.eval_set()
    cfg = AttackConfig(
        copies=1, ham=HamParams(sigma=0.0, rho=0.0), hfm=HfmParams(levels=1), master_seed=MASTER
    )
    mismatches = 0
    for i in range(20):
        via_full, _ = fsa_attack(model, images[i], int(labels[i]), cfg, RandomStream(MASTER).child(61, i))
        via_baseline = mi_fgsm_attack(model, images[i], int(labels[i]), cfg, RandomStream(MASTER).child(61, i))
        mismatches += int(not np.array_equal(via_full, via_baseline))
    _check(6, mismatches == 0,
           f"N=1 sigma=0 rho=0 n=1 attack bitwise-equal to the momentum baseline on 20 images "
           f"({mismatches} mismatches)")


def test_criterion_07_white_box_effectiveness(whitebox_runs, acceptance_suite):
    labels = whitebox_runs["labels"]
    model = acceptance_suite[SOURCE_ID]
    asrs, total_time = {}, 0.0
    for attack, (advs, seconds) in whitebox_runs["runs"].items():
        asrs[attack] = float(np.mean(predict(model, advs) != labels))
        total_time += seconds
    ok = asrs["mi_fgsm"] >= 0.90 and asrs["fsa"] >= 0.90 and total_time < 600
    _check(7, ok, f"white-box ASR mi_fgsm {100 * asrs['mi_fgsm']:.1f}% fsa {100 * asrs['fsa']:.1f}% "
                  f"(each >=90%) on 200 eval images, crafted in {total_time:.0f}s (<600s)")


def test_criterion_08_transfer_ordering(transfer_protocol):
    avgs, elapsed = transfer_protocol
    failures = []
    for target in GATE_TARGETS:
        fsa, mi = avgs[("fsa", target)], avgs[("mi_fgsm", target)]
        ham, hfm = avgs[("ham", target)], avgs[("hfm", target)]
        if fsa - mi < 0.03 - 1e-12:
            failures.append(f"{target}: fsa-mi {100 * (fsa - mi):+.2f} < +3")
        if fsa < ham - 0.02 or fsa < hfm - 0.02:
            failures.append(f"{target}: fsa below a single-module arm by >2")
        if ham < mi - 0.01 or hfm < mi - 0.01:
            failures.append(f"{target}: a single-module arm below baseline by >1")
    hardened_gain = avgs[("fsa", "cnn_small_adv")] - avgs[("mi_fgsm", "cnn_small_adv")]
    gains = ", ".join(
        f"{t}:{100 * (avgs[('fsa', t)] - avgs[('mi_fgsm', t)]):+.1f}" for t in GATE_TARGETS
    )
    ok = not failures and elapsed < 3600
    _check(8, ok, f"3-triple averaged transfer gains {gains} points (each >=+3), arms within "
                  f"tolerances, hardened target {100 * hardened_gain:+.1f}, {elapsed:.0f}s (<3600s)"
                  + ("; FAILURES: " + "; ".join(failures) if failures else ""))


def test_criterion_09_ablation_trends(sweep_curves):
    curves, elapsed = sweep_curves
    n_curve, k_curve, s_curve = curves["N"], curves["kernel"], curves["sigma"]
    n_values = [1, 4, 8, 20, 32]
    rise_ok = all(
        n_curve[b] >= n_curve[a] - 0.02 for a, b in zip(n_values[:-2], n_values[1:-1])
    )  # non-decreasing within 2 points up to N=20
    plateau_ok = abs(n_curve[32] - n_curve[20]) <= 0.02
    spread = max(k_curve.values()) - min(k_curve.values())
    kernel_ok = spread <= 0.04
    s_values = [1.0, 2.0, 3.0, 4.0]
    peak = max(s_values, key=lambda v: s_curve[v])
    peak_ok = peak in (1.0, 2.0, 3.0)  # maximum inside [eps, 3*eps]
    after = s_values[s_values.index(peak):]
    decline_ok = all(s_curve[b] <= s_curve[a] + 0.02 for a, b in zip(after, after[1:]))
    ok = rise_ok and plateau_ok and kernel_ok and peak_ok and decline_ok
    n_text = "/".join(f"{100 * n_curve[v]:.1f}" for v in n_values)
    s_text = "/".join(f"{100 * s_curve[v]:.1f}" for v in s_values)
    _check(9, ok, f"N curve {n_text} (rise within 2pts, plateau after 20), kernel spread "
                  f"{100 * spread:.1f}pts (<=4), sigma curve {s_text} peaks at {peak}*eps "
                  f"(in [1,3]) and declines, {elapsed:.0f}s")


def test_criterion_10_determinism_and_formats(acceptance_data, acceptance_suite, tmp_path):
    spec = ExperimentSpec(
        sources=(SOURCE_ID,),
        targets=TARGET_IDS,
        attacks=("mi_fgsm", "fsa"),
        config=AttackConfig(master_seed=MASTER),
    )
    reports = {}
    for threads in (1, 8):
        out = tmp_path / f"threads{threads}"
        reports[threads] = run_experiment(
            spec, acceptance_suite, acceptance_data, out_dir=out, threads=threads, limit=30
        )
    same_text = report_csv_text(reports[1]) == report_csv_text(reports[8])
    same_bytes = all(
        (tmp_path / "threads1" / name).read_bytes() == (tmp_path / "threads8" / name).read_bytes()
        for name in ("report.csv", "report.md", "per_image_cnn_small_a_fsa.csv")
    )
    model_path = tmp_path / "model.fsam"
    save_model(acceptance_suite[SOURCE_ID], model_path)
    back = load_model(model_path)
    model_ok = all(
        np.array_equal(back.params[k], acceptance_suite[SOURCE_ID].params[k]) for k in back.params
    )
    data_path = tmp_path / "data.fsad"
    save_dataset(acceptance_data, data_path)
    loaded = load_dataset(data_path)
    data_ok = np.array_equal(loaded.images, acceptance_data.images) and np.array_equal(
        loaded.labels, acceptance_data.labels
    )
    data_path.write_bytes(data_path.read_bytes()[:-3])
    try:
        load_dataset(data_path)
        truncation_ok = False
    except FileFormatError as e:
        truncation_ok = "checksum" in str(e)
    ok = same_text and same_bytes and model_ok and data_ok and truncation_ok
    _check(10, ok, f"1-thread vs 8-thread reports byte-identical={same_bytes}, model roundtrip "
                   f"bitwise={model_ok}, dataset roundtrip bitwise={data_ok}, truncation yields "
                   f"checksum error={truncation_ok}")
