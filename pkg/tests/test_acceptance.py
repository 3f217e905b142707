"""Acceptance gate: the eight headline behaviors, one printed line each.

Run with ``pytest tests/test_acceptance.py -s`` to see the PASS lines; each
criterion also asserts, so a regression fails the suite loudly.  Budgets are
wall-clock and enforced.
"""

import time
import warnings

import numpy as np

from spp import (
    LoraAdapter,
    NetLayer,
    NofM,
    Rng,
    SppAdapter,
    ToyNet,
    TrainConfig,
    Unstructured,
    apply_mask,
    build_mask,
    count_trainable,
    dropout_apply,
    eval_loss,
    lora_backward,
    lora_forward,
    lora_init,
    lora_merge_dense,
    make_teacher_student,
    matmul,
    score_magnitude,
    spp_backward,
    spp_forward_naive,
    spp_forward_optimized,
    spp_init,
    spp_merge,
    track_allocations,
    train,
    verify_mask,
)
from spp.cli import main

LLAMA7B_SHAPES = [(4096, 4096)] * 4 + [(11008, 4096)] * 2 + [(4096, 11008)]
LLAMA7B_EXTRA = 2 * 32000 * 4096 + 32 * 2 * 4096 + 4096
LLAMA13B_SHAPES = [(5120, 5120)] * 4 + [(13824, 5120)] * 2 + [(5120, 13824)]
LLAMA13B_EXTRA = 2 * 32000 * 5120 + 40 * 2 * 5120 + 5120

GOLDEN_U64_SEED42 = [
    0x15780B2E0C2EC716,
    0x6104D9866D113A7E,
    0xAE17533239E499A1,
    0xECB8AD4703B360A1,
    0xFDE6DC7FE2EC5E64,
    0xC50DA53101795238,
    0xB82154855A65DDB2,
    0xD99A2743EBE60087,
    0xC2E96E726E97647E,
    0x9556615F775FBC3D,
    0xAEB53B340C103971,
    0x4A69DB9873AF8965,
    0xCD0FEDA93006C6B6,
    0x52480865A4B42742,
    0xB60DEC3BF2D887CD,
    0xE0B55A68B96677FA,
]


def report(num: int, ok: bool, detail: str) -> None:
    print(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")
    assert ok, f"criterion {num}: {detail}"


def rand_mat(rng, m, n, lo=-1.0, hi=1.0):
    return rng.uniform(lo, hi, m, n)


def test_criterion_1_parameter_budget():
    t7, total7, pm7 = count_trainable(LLAMA7B_SHAPES, 32, 16, LLAMA7B_EXTRA)
    t13, total13, pm13 = count_trainable(LLAMA13B_SHAPES, 40, 16, LLAMA13B_EXTRA)
    ok = (
        t7 == 19_578_880
        and abs(pm7 - 2.90) <= 0.01
        and t13 == 30_638_080
        and abs(pm13 - 2.35) <= 0.01
    )
    report(
        1,
        ok,
        f"7B adapters {t7} of {total7} = {pm7:.4f} per mille, "
        f"13B {t13} of {total13} = {pm13:.4f} per mille",
    )


def test_criterion_2_sparsity_preservation():
    start = time.monotonic()
    rng = Rng(2024)
    patterns = [Unstructured(0.5), Unstructured(0.75), NofM(2, 4), NofM(2, 8)]
    m_choices = [4, 8, 12, 16, 24, 32, 48, 64]
    n_choices = [8, 16, 24, 32, 40, 48, 56, 64]
    scales = [0.5, 1.0, 2.0]
    cases = 1200
    bad = 0
    for i in range(cases):
        m = m_choices[int(rng.next_double() * len(m_choices))]
        n = n_choices[int(rng.next_double() * len(n_choices))]
        pattern = patterns[i % len(patterns)]
        divisors = [d for d in range(1, m + 1) if m % d == 0]
        r = divisors[int(rng.next_double() * len(divisors))]
        s = scales[i % len(scales)]

        w = rand_mat(rng, m, n)
        layer = apply_mask(w, build_mask(score_magnitude(w), pattern))
        ad = SppAdapter(
            alpha=rand_mat(rng, r, n),
            beta=rand_mat(rng, m, 1),
            r=r,
            s=s,
            p=0.0,
        )
        merged = spp_merge(layer, ad)
        zero_at = layer.mask.mask == 0.0
        if np.any(merged.weight[zero_at] != 0.0):
            bad += 1
        elif np.count_nonzero(merged.weight) != np.count_nonzero(layer.weight):
            bad += 1
        elif not verify_mask(merged).ok:
            bad += 1
    elapsed = time.monotonic() - start
    ok = bad == 0 and elapsed < 10.0
    report(
        2,
        ok,
        f"zeros and nnz preserved on {cases - bad}/{cases} randomized "
        f"merge cases in {elapsed:.1f}s",
    )


def test_criterion_3_forward_equivalence_and_memory():
    start = time.monotonic()
    rng = Rng(7)
    worst = 0.0
    checked = 0
    for b in (1, 2, 7):
        for m in (4, 8, 16):
            for n in (4, 12):
                for r in [d for d in range(1, m + 1) if m % d == 0]:
                    for p in (0.0, 0.3):
                        w = rand_mat(rng, m, n)
                        layer = apply_mask(
                            w, build_mask(score_magnitude(w), Unstructured(0.5))
                        )
                        ad = spp_init(m, n, r, 1.3, p, rng)
                        ad.beta = rand_mat(rng, m, 1)
                        x = rand_mat(rng, b, n)
                        if p > 0.0:
                            _, shared = dropout_apply(x, p, rng, training=True)
                        else:
                            shared = None
                        y1, _ = spp_forward_naive(
                            x, layer, ad, training=p > 0, dropout_mask=shared
                        )
                        y2, _ = spp_forward_optimized(
                            x, layer, ad, training=p > 0, dropout_mask=shared
                        )
                        scale = max(1.0, float(np.abs(y1).max()))
                        worst = max(worst, float(np.abs(y2 - y1).max()) / scale)
                        checked += 1

    m, n = 16, 12
    w = rand_mat(rng, m, n)
    layer = apply_mask(w, build_mask(score_magnitude(w), Unstructured(0.5)))
    ad = spp_init(m, n, 4, 1.0, 0.0, rng)
    ad.beta = rand_mat(rng, m, 1)
    x = rand_mat(rng, 7, n)
    with track_allocations() as log:
        spp_forward_optimized(x, layer, ad)
    no_big_buffer = (m, n) not in log
    with track_allocations() as log:
        spp_forward_naive(x, layer, ad)
    control = (m, n) in log

    elapsed = time.monotonic() - start
    ok = worst <= 1e-12 and no_big_buffer and control and elapsed < 5.0
    report(
        3,
        ok,
        f"block-split forward matches reference on {checked} configs "
        f"(worst rel err {worst:.2e}), no m x n transient, in {elapsed:.1f}s",
    )


def _num_grad(f, param, h=1e-5):
    g = np.zeros_like(param)
    it = np.nditer(param, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = param[idx]
        param[idx] = old + h
        up = f()
        param[idx] = old - h
        dn = f()
        param[idx] = old
        g[idx] = (up - dn) / (2.0 * h)
    return g


def _grad_ok(got, want, tol=1e-6):
    return np.abs(got - want).max() <= tol * (1.0 + np.abs(want).max())


def test_criterion_4_gradient_checks():
    start = time.monotonic()
    rng = Rng(4)
    failures = []
    for i in range(50):
        m, n, b = 8, 8, 3
        r = (1, 2, 4, 8)[i % 4]
        p = 0.3 if i % 5 == 0 else 0.0
        w = rand_mat(rng, m, n)
        layer = apply_mask(w, build_mask(score_magnitude(w), NofM(2, 4)))
        ad = spp_init(m, n, r, 1.1, p, rng)
        ad.beta = rand_mat(rng, m, 1)
        x = rand_mat(rng, b, n)
        t = rand_mat(rng, b, m)
        shared = dropout_apply(x, p, rng, training=True)[1] if p > 0 else None

        def loss():
            y, _ = spp_forward_naive(
                x, layer, ad, training=shared is not None, dropout_mask=shared
            )
            return 0.5 * np.sum((y - t) ** 2)

        y, cache = spp_forward_naive(
            x, layer, ad, training=True, dropout_mask=shared
        )
        g = spp_backward(cache, y - t)
        if not (
            _grad_ok(g.d_alpha, _num_grad(loss, ad.alpha))
            and _grad_ok(g.d_beta, _num_grad(loss, ad.beta))
            and _grad_ok(g.d_x, _num_grad(loss, x))
        ):
            failures.append(("spp", i))

    for i in range(50):
        m, n, b = 8, 8, 3
        r = (1, 2, 4)[i % 3]
        p = 0.3 if i % 5 == 0 else 0.0
        w = rand_mat(rng, m, n)
        layer = apply_mask(w, build_mask(score_magnitude(w), NofM(2, 4)))
        ad = lora_init(m, n, r, 1.1, p, rng)
        ad.b = rand_mat(rng, m, r)
        x = rand_mat(rng, b, n)
        t = rand_mat(rng, b, m)
        shared = dropout_apply(x, p, rng, training=True)[1] if p > 0 else None

        def loss():
            y, _ = lora_forward(
                x, layer, ad, training=shared is not None, dropout_mask=shared
            )
            return 0.5 * np.sum((y - t) ** 2)

        y, cache = lora_forward(x, layer, ad, training=True, dropout_mask=shared)
        g = lora_backward(cache, y - t)
        if not (
            _grad_ok(g.d_a, _num_grad(loss, ad.a))
            and _grad_ok(g.d_b, _num_grad(loss, ad.b))
            and _grad_ok(g.d_x, _num_grad(loss, x))
        ):
            failures.append(("lora", i))

    elapsed = time.monotonic() - start
    ok = not failures and elapsed < 10.0
    report(
        4,
        ok,
        f"analytic gradients match central differences on 50 + 50 instances "
        f"(failures: {failures or 'none'}) in {elapsed:.1f}s",
    )


def test_criterion_5_init_transparency_and_warning():
    rng = Rng(5)
    transparent = True
    for seed in range(10):
        m, n = 16, 8
        w = rand_mat(rng, m, n)
        layer = apply_mask(w, build_mask(score_magnitude(w), NofM(2, 4)))
        ad = spp_init(m, n, 4, 1.0, 0.05, rng)
        x = rand_mat(rng, 3, n)
        base = matmul(x, layer.weight)
        y_eval, _ = spp_forward_naive(x, layer, ad)
        y_train, cache = spp_forward_naive(x, layer, ad, rng=rng, training=True)
        transparent = (
            transparent
            and np.array_equal(y_eval, base)
            and np.array_equal(y_train, base)
        )

    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        dead = SppAdapter(alpha=np.zeros((4, 8)), beta=np.zeros((16, 1)), r=4, p=0.0)
    warned = any(issubclass(c.category, UserWarning) for c in caught)

    w = rand_mat(rng, 16, 8)
    layer = apply_mask(w, build_mask(score_magnitude(w), NofM(2, 4)))
    x = rand_mat(rng, 3, 8)
    y, cache = spp_forward_naive(x, layer, dead, training=True)
    g = spp_backward(cache, y - rand_mat(rng, 3, 16))
    stuck = bool(np.all(g.d_alpha == 0.0))

    ok = transparent and warned and stuck
    report(
        5,
        ok,
        f"fresh adapters are exact pass-through (10/10), both-zero init warns "
        f"and its alpha gradient is identically zero",
    )


def test_criterion_6_recovery():
    start = time.monotonic()
    improvements = []
    merged_ok = True
    lora_star_losses = []
    spp_losses = []
    for seed in range(5):
        ts = make_teacher_student(seed, 64, 64, NofM(2, 4), 2048)
        before = eval_loss(ts.student, ts.x_eval, ts.y_eval)
        layer = ts.student.layers[0].layer
        ad = spp_init(64, 64, 8, 1.0, 0.05, Rng(seed + 1000))
        ts.student.layers[0].adapter = ad
        cfg = TrainConfig(steps=500, optimizer="adamw", batch_size=32, seed=seed)
        train(ts.student, (ts.x_train, ts.y_train), cfg)
        after = eval_loss(ts.student, ts.x_eval, ts.y_eval)
        improvements.append((before - after) / before)
        spp_losses.append(after)

        merged = spp_merge(layer, ad)
        merged_ok = merged_ok and verify_mask(merged).ok

        # LoRA* contrast at a comparable budget (576 vs 512 trainables)
        ts2 = make_teacher_student(seed, 64, 64, NofM(2, 4), 2048)
        lad = lora_init(64, 64, 4, 1.0, 0.05, Rng(seed + 1000))
        ts2.student.layers[0].adapter = lad
        train(ts2.student, (ts2.x_train, ts2.y_train), cfg)
        dense = lora_merge_dense(ts2.student.layers[0].layer, lad)
        star = apply_mask(dense, ts2.student.layers[0].layer.mask)
        star_net = ToyNet([NetLayer(star)], loss="mse")
        lora_star_losses.append(eval_loss(star_net, ts.x_eval, ts.y_eval))

    elapsed = time.monotonic() - start
    strictly_better = all(i > 0.0 for i in improvements)
    spp_wins = sum(s < l for s, l in zip(spp_losses, lora_star_losses))
    ok = strictly_better and merged_ok and elapsed < 60.0
    report(
        6,
        ok,
        f"adapter recovery beat the pruned baseline on 5/5 seeds "
        f"(gains {min(improvements) * 100:.1f}%-{max(improvements) * 100:.1f}%), "
        f"merged masks verified; reported not gated: multiplicative beats "
        f"repruned low-rank on {spp_wins}/5 seeds; in {elapsed:.1f}s",
    )


def test_criterion_7_densification_contrast():
    rng = Rng(77)
    m = n = 32
    lora_densified = 0
    spp_preserved = 0
    for _ in range(100):
        w = rand_mat(rng, m, n)
        layer = apply_mask(w, build_mask(score_magnitude(w), NofM(2, 4)))
        nnz0 = np.count_nonzero(layer.weight)

        # comparable budgets: 32 + 4 * 32 = 160 vs 2 * 64 = 128 trainables
        lad = LoraAdapter(a=rand_mat(rng, 2, n), b=rand_mat(rng, m, 2), s=1.0, p=0.0)
        if np.count_nonzero(lora_merge_dense(layer, lad)) > nnz0:
            lora_densified += 1

        sad = SppAdapter(
            alpha=rand_mat(rng, 4, n), beta=rand_mat(rng, m, 1), r=4, s=1.0, p=0.0
        )
        if np.count_nonzero(spp_merge(layer, sad).weight) == nnz0:
            spp_preserved += 1

    ok = lora_densified == 100 and spp_preserved == 100
    report(
        7,
        ok,
        f"low-rank merge densified {lora_densified}/100 draws, multiplicative "
        f"merge preserved nnz on {spp_preserved}/100",
    )


def test_criterion_8_bit_reproducibility(tmp_path):
    golden_ok = True
    r = Rng(42)
    for want in GOLDEN_U64_SEED42:
        if r.next_u64() != want:
            golden_ok = False
            break

    digests = []
    for run in range(2):
        d = tmp_path / f"run{run}"
        d.mkdir()
        rng = Rng(13)
        dense = d / "dense.spp"
        from spp import TensorStore, store_write

        st = TensorStore()
        st.add("w", rng.uniform(-1.0, 1.0, 16, 16))
        store_write(st, dense)
        data = d / "data.spp"
        st = TensorStore()
        x = rng.uniform(-1.0, 1.0, 64, 16)
        tgt = rng.uniform(-1.0, 1.0, 16, 16)
        st.add("x", x)
        st.add("y", x @ tgt.T)
        store_write(st, data)

        pruned, adapted, trained = (str(d / f"{k}.spp") for k in ("p", "a", "t"))
        csv = str(d / "run.csv")
        assert main(["prune", str(dense), pruned, "--pattern", "2:4"]) == 0
        assert main(["attach", pruned, adapted, "--r", "4", "--seed", "0"]) == 0
        assert (
            main(
                ["train", adapted, str(data), trained,
                 "--steps", "40", "--seed", "0", "--run-csv", csv]
            )
            == 0
        )
        digests.append(
            (
                open(pruned, "rb").read(),
                open(adapted, "rb").read(),
                open(trained, "rb").read(),
                open(csv).read(),
            )
        )

    identical = digests[0] == digests[1]
    ok = golden_ok and identical
    report(
        8,
        ok,
        "seed-42 generator matches the checked-in golden vector and two "
        "identical pipeline runs produced byte-identical checkpoints and logs",
    )
