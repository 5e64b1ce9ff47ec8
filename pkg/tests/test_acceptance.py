"""Acceptance suite: one test per exit criterion, at its stated tolerance.

Each test prints a single PASS/FAIL line (run pytest with -s or look at the
captured output). Criteria 7 and 8 require the full default training run and
dominate the suite's runtime.
"""

import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from stylebook_vc import fileio
from stylebook_vc.attention import MultiHeadAttention, mha_forward
from stylebook_vc.blocks import make_linear
from stylebook_vc.content import encode_content, fit_codebook, quantize
from stylebook_vc.corpus import CorpusSpec, generate_corpus
from stylebook_vc.diffusion import DiffusionSchedule, cfg_score, forward_perturb
from stylebook_vc.gradcheck import grad_check
from stylebook_vc.harness import enroll, evaluate, memory_model
from stylebook_vc.knn import TargetBank, knn_match
from stylebook_vc.model import ConversionModel, ModelConfig
from stylebook_vc.stylebook import attention_profile, retrieve_styles

from _reference import naive_knn_match, naive_mha, random_mha_instance
from conftest import tiny_run_config
from test_gradients import GRAD_MODEL, _EncodeStyle, _FrozenTotalLoss, _SoftmaxXent
from test_diffusion import DATA_MEAN, DATA_VAR, _gaussian_sample


def _report(name, ok, detail=""):
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


def test_criterion_1_memory_table_exact():
    started = time.perf_counter()
    exact = (
        all(memory_model("yourtts", s) == 2.0 for s in (10, 60, 300))
        and all(memory_model("freevc", s) == 1.0 for s in (10, 60, 300))
        and all(memory_model("diffvc", s) == 1.5 for s in (10, 60, 300))
        and all(memory_model("proposed", s) == 32.0 for s in (10, 60, 300))
        and memory_model("knnvc", 10) == 2000.0
        and memory_model("knnvc", 60) == 12000.0
        and memory_model("knnvc", 300) == 60000.0
    )
    elapsed = time.perf_counter() - started
    _report(
        "criterion 1 (memory table, zero tolerance)",
        exact and elapsed < 1.0,
        f"all rows exact, {elapsed:.3f}s",
    )


def test_criterion_2_fixed_size_stylebook(tmp_path):
    started = time.perf_counter()
    spec = CorpusSpec(num_speakers=1, seed=77)
    model = ConversionModel(ModelConfig(), torch.Generator().manual_seed(0))
    model.eval()
    # 10 s / 1 min / 5 min of target material at 50 frames/s, in 500-frame
    # utterances: 1, 6, and 30 utterances respectively
    corpus = generate_corpus(spec, 30, 500)
    codebook = fit_codebook(
        np.concatenate([u.content_features for u in corpus[:4]]), 100, iters=10, seed=0
    )
    sizes, payloads, books = [], [], []
    for count in (1, 6, 30):
        book = enroll(model, codebook, corpus[:count], provenance="x")
        path = tmp_path / f"book_{count}.sbk"
        book.save(path)
        sizes.append(path.stat().st_size)
        payloads.append(fileio.stylebook_payload_bytes(path))
        books.append(book.as_tensor())

    source = torch.randn(160, 256, generator=torch.Generator().manual_seed(1))
    medians = []
    with torch.no_grad():
        for book in books:
            retrieve_styles(model.retrieve_attn, source, model.query_set, book)  # warmup
            reps = []
            for _ in range(15):
                t0 = time.perf_counter()
                retrieve_styles(model.retrieve_attn, source, model.query_set, book)
                reps.append(time.perf_counter() - t0)
            medians.append(float(np.median(reps)))
    ratio = max(medians) / min(medians)
    elapsed = time.perf_counter() - started
    ok = len(set(sizes)) == 1 and payloads == [32768] * 3 and ratio < 2.0 and elapsed < 60
    _report(
        "criterion 2 (fixed-size stylebook)",
        ok,
        f"file sizes {sizes}, payload {payloads[0]} B, retrieval ratio {ratio:.2f}x, {elapsed:.1f}s",
    )


def test_criterion_3_attention_correctness():
    started = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for trial in range(50):
        heads = int(rng.choice([1, 2, 4]))
        head_dim = int(rng.integers(2, 6))
        model_dim = heads * head_dim
        dims = rng.integers(2, 9, size=4)
        r, t = int(rng.integers(1, 7)), int(rng.integers(1, 9))
        mha, q, k, v = random_mha_instance(
            trial, heads, model_dim, int(dims[0]), int(dims[1]), int(dims[2]), int(dims[3]), r, t
        )
        out = mha_forward(mha, q, k, v)
        worst = max(worst, float(np.abs(out.detach().numpy() - naive_mha(mha, q, k, v)).max()))

    gen = torch.Generator().manual_seed(1)
    mha = MultiHeadAttention(2, 16, generator=gen)
    _, weights = mha(
        torch.randn(6, 16, generator=gen), torch.randn(9, 16, generator=gen),
        torch.randn(9, 16, generator=gen), return_weights=True,
    )
    row_err = float((weights.sum(dim=-1) - 1.0).abs().max())

    mha_d, q, k, v = random_mha_instance(99, 2, 8, 8, 8, 8, 8, r=5, t=12)
    perm = torch.randperm(12, generator=torch.Generator().manual_seed(2))
    perm_err = float((mha_forward(mha_d, q, k, v) - mha_forward(mha_d, q, k[perm], v[perm])).abs().max())

    elapsed = time.perf_counter() - started
    ok = worst < 1e-10 and row_err < 1e-6 and perm_err < 1e-12 and elapsed < 60
    _report(
        "criterion 3 (attention correctness)",
        ok,
        f"brute-force err {worst:.2e}, row-sum err {row_err:.2e}, perm err {perm_err:.2e}, {elapsed:.1f}s",
    )


def test_criterion_4_gradient_suite():
    started = time.perf_counter()
    gen = torch.Generator().manual_seed(0)
    errors = {}

    errors["linear"] = grad_check(make_linear(5, 3, gen), (torch.randn(4, 5, generator=gen),))
    logits = torch.randn(6, 5, generator=gen)
    targets = torch.randint(0, 5, (6,), generator=gen)
    errors["softmax_xent"] = grad_check(_SoftmaxXent(targets), (logits,))
    mha = MultiHeadAttention(2, 8, generator=gen)
    errors["mha"] = grad_check(
        mha, (torch.randn(3, 8, generator=gen), torch.randn(5, 8, generator=gen), torch.randn(5, 8, generator=gen))
    )
    style_block = _EncodeStyle(mel_dim=4, content_dim=6, hidden=8, generator=gen)
    errors["style_encoder"] = grad_check(
        style_block, (torch.randn(5, 4, generator=gen), torch.randn(5, 6, generator=gen))
    )
    model = ConversionModel(GRAD_MODEL, gen)
    units = torch.randint(0, GRAD_MODEL.num_units, (2, 6), generator=gen)
    mel = torch.randn(2, 6, GRAD_MODEL.mel_dim, generator=gen)
    noise = torch.randn(2, 6, GRAD_MODEL.mel_dim, generator=gen)
    loss_block = _FrozenTotalLoss(model, DiffusionSchedule(), units, torch.tensor([0.7, 0.3]), noise)
    errors["total_loss"] = grad_check(loss_block, (mel,))

    elapsed = time.perf_counter() - started
    ok = all(err < 1e-4 for err in errors.values()) and elapsed < 300
    detail = ", ".join(f"{k}={v:.2e}" for k, v in errors.items())
    _report("criterion 4 (gradient suite)", ok, f"{detail}, {elapsed:.0f}s")


def test_criterion_5_diffusion_numerics():
    started = time.perf_counter()
    schedule = DiffusionSchedule()
    gen = torch.Generator().manual_seed(0)

    stat_ok = True
    x0 = torch.tensor([1.4, -0.6]).expand(10_000, 2)
    mu = torch.tensor([0.2, 0.3]).expand(10_000, 2)
    for t in (0.1, 0.5, 0.9):
        x_t = forward_perturb(x0, mu, t, torch.randn(10_000, 2, generator=gen), schedule)
        expected_mean = mu[0] + (x0[0] - mu[0]) * float(schedule.decay(t))
        var = float(schedule.variance(t))
        mean_ok = float((x_t.mean(0) - expected_mean).abs().max()) < 0.03 * max(1.0, float(expected_mean.abs().max()))
        var_ok = float(((x_t.var(0) - var).abs() / var).max()) < 0.03
        stat_ok = stat_ok and mean_ok and var_ok

    from test_diffusion import _ConstantScoreNet, _StubModel

    uncond = torch.ones(3)
    model = _StubModel(_ConstantScoreNet(3.0, 1.0, uncond), uncond)
    x = torch.randn(5, 2, generator=gen)
    plain = cfg_score(model, x, 0.5, torch.zeros(5, 2), torch.full((5, 3), 2.0), uncond,
                      DiffusionSchedule(guidance_scale_style=0.0))
    gamma_zero_exact = torch.equal(plain, torch.full_like(x, 3.0))
    equal_cond = cfg_score(model, x, 0.5, torch.zeros(5, 2), uncond.expand(5, 3), uncond,
                           DiffusionSchedule(guidance_scale_style=0.7))
    equal_exact = torch.equal(equal_cond, torch.full_like(x, 1.0))

    draws = _gaussian_sample(num_steps=30, n_samples=10_000, seed=0)
    mean_rel = float(torch.linalg.norm(draws.mean(0) - DATA_MEAN) / torch.linalg.norm(DATA_MEAN))
    cov = torch.as_tensor(np.cov(draws.numpy().T))
    target_cov = torch.diag(DATA_VAR).double()
    cov_rel = float(torch.linalg.norm(cov - target_cov) / torch.linalg.norm(target_cov))

    elapsed = time.perf_counter() - started
    ok = stat_ok and gamma_zero_exact and equal_exact and mean_rel < 0.05 and cov_rel < 0.05 and elapsed < 300
    _report(
        "criterion 5 (diffusion numerics)",
        ok,
        f"marginals within 3%: {stat_ok}, cfg identities exact: {gamma_zero_exact and equal_exact}, "
        f"gaussian mean {mean_rel:.3f} / cov {cov_rel:.3f}, {elapsed:.0f}s",
    )


def test_criterion_6_knn_oracle():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        t = int(rng.integers(2, 40))
        d = int(rng.integers(2, 10))
        k = int(rng.integers(1, t + 1))
        bank = TargetBank(frames=rng.standard_normal((t, d)).astype(np.float32))
        source = rng.standard_normal((5, d))
        worst = max(worst, float(np.abs(knn_match(bank, source, k) - naive_knn_match(bank.frames, source, k)).max()))

    bank = TargetBank(frames=rng.standard_normal((13, 6)).astype(np.float32))
    out = knn_match(bank, rng.standard_normal((4, 6)), k=13)
    mean_identity = all(np.array_equal(row, bank.frames.astype(np.float64).mean(axis=0)) for row in out)
    ok = worst <= 1e-12 and mean_identity
    _report("criterion 6 (kNN oracle)", ok, f"max err {worst:.2e} over 100 instances, k=T identity exact: {mean_identity}")


@pytest.mark.slow
def test_criterion_7_end_to_end(default_run):
    report = evaluate(
        default_run["model"],
        default_run["codebook"],
        default_run["eval_part"],
        num_pairs=112,
        seed=0,
        loss_history=default_run["history"],
    )
    train_minutes = default_run["train_seconds"] / 60
    ok = (
        default_run["train_seconds"] < 1800
        and report.num_pairs >= 100
        and report.target_preference_rate >= 0.80
        and report.content_accuracy >= 0.85
    )
    _report(
        "criterion 7 (end-to-end style transfer, calibration-target thresholds)",
        ok,
        f"train {train_minutes:.1f} min, pairs {report.num_pairs}, "
        f"prefer-target {report.target_preference_rate:.3f} (>=0.80), "
        f"content accuracy {report.content_accuracy:.3f} (>=0.85), "
        f"sim target {report.style_similarity_to_target:.3f} vs source {report.style_similarity_to_source:.3f}",
    )


@pytest.mark.slow
def test_criterion_8_attention_profile_property(default_run):
    started = time.perf_counter()
    model = default_run["model"]
    codebook = default_run["codebook"]
    eval_part = default_run["eval_part"]
    num_classes = default_run["config"].corpus.num_phone_classes

    per_utt = []
    embs, labels = [], []
    with torch.no_grad():
        for utt in eval_part:
            units = quantize(codebook, utt.content_features)
            emb = encode_content(model.content_encoder, units)
            embs.append(emb)
            labels.append(utt.phone_labels)
            prof = attention_profile(model.retrieve_attn, emb, model.query_set, utt.phone_labels)
            per_utt.append(dict(zip(prof.class_ids, prof.profiles)))

    def _cos(a, b):
        return float(np.dot(a, b) / max(np.linalg.norm(a) * np.linalg.norm(b), 1e-12))

    within, between = [], []
    for i in range(len(per_utt)):
        for j in range(i + 1, len(per_utt)):
            for ca, pa in per_utt[i].items():
                for cb, pb in per_utt[j].items():
                    (within if ca == cb else between).append(_cos(pa, pb))
    within_mean, between_mean = float(np.mean(within)), float(np.mean(between))

    aggregate = attention_profile(model.retrieve_attn, embs, model.query_set, labels, num_classes)
    sim = aggregate.similarity
    ids = aggregate.class_ids
    off_diag = sim[~np.eye(len(sim), dtype=bool)]
    adjacent = sim[ids.index(0), ids.index(1)]
    decile = float(np.percentile(off_diag, 90))

    elapsed = time.perf_counter() - started
    ok = within_mean > between_mean and adjacent >= decile and elapsed < 120
    _report(
        "criterion 8 (class-dependent attention profiles)",
        ok,
        f"within {within_mean:.3f} > between {between_mean:.3f}, adjacent-pair sim {adjacent:.3f} "
        f">= 90th pct {decile:.3f}, {elapsed:.0f}s",
    )


def test_criterion_9_cli_determinism(tmp_path):
    config_path = tmp_path / "config.json"
    fileio.write_json(config_path, tiny_run_config(num_steps=8, checkpoint_interval=4).to_dict())

    def run_all(root: Path) -> dict[str, Path]:
        root.mkdir()
        corpus = root / "corpus"
        rundir = root / "run"
        outputs = {}

        def cli(*args):
            proc = subprocess.run(
                [sys.executable, "-m", "stylebook_vc", *args],
                capture_output=True, text=True, timeout=600,
            )
            assert proc.returncode == 0, proc.stderr
            return proc

        cli("synth-corpus", "--config", str(config_path), "--out", str(corpus))
        for f in sorted(corpus.iterdir()):
            outputs[f"corpus/{f.name}"] = f
        cli("fit-units", "--corpus", str(corpus), "--out", str(root / "units.sbc"),
            "--clusters", "12", "--iters", "5", "--seed", "1")
        outputs["units.sbc"] = root / "units.sbc"
        cli("train", "--config", str(config_path), "--corpus", str(corpus), "--out", str(rundir))
        outputs["checkpoint.sbc"] = rundir / "checkpoint.sbc"
        cli("enroll", "--checkpoint", str(rundir / "checkpoint.sbc"), "--corpus", str(corpus),
            "--speaker", "1", "--out", str(root / "spk1.sbk"))
        outputs["spk1.sbk"] = root / "spk1.sbk"
        cli("convert", "--checkpoint", str(rundir / "checkpoint.sbc"), "--stylebook", str(root / "spk1.sbk"),
            "--source", str(corpus / "utt_00000.sbm"), "--out", str(root / "conv.sbm"),
            "--steps", "5", "--seed", "3")
        outputs["conv.sbm"] = root / "conv.sbm"
        cli("baseline-knn", "--corpus", str(corpus), "--target-speaker", "2",
            "--source", str(corpus / "utt_00000.sbm"), "--out", str(root / "knn.sbm"), "--k", "3")
        outputs["knn.sbm"] = root / "knn.sbm"
        cli("bench-memory", "--out", str(root / "memory.tsv"))
        outputs["memory.tsv"] = root / "memory.tsv"
        cli("evaluate", "--checkpoint", str(rundir / "checkpoint.sbc"), "--corpus", str(corpus),
            "--pairs", "4", "--seed", "2", "--out", str(root / "report.json"))
        outputs["report.json"] = root / "report.json"
        cli("analyze-attention", "--checkpoint", str(rundir / "checkpoint.sbc"), "--corpus", str(corpus),
            "--out-prefix", str(root / "attn"))
        outputs["attn_profiles.tsv"] = root / "attn_profiles.tsv"
        outputs["attn_similarity.tsv"] = root / "attn_similarity.tsv"
        return outputs

    first = run_all(tmp_path / "run1")
    second = run_all(tmp_path / "run2")
    assert first.keys() == second.keys()
    mismatched = [
        name for name in first
        if fileio.file_digest(first[name]) != fileio.file_digest(second[name])
    ]
    _report(
        "criterion 9 (CLI determinism)",
        not mismatched,
        f"{len(first)} primary outputs byte-identical across reruns"
        + (f"; MISMATCHED: {mismatched}" if mismatched else ""),
    )
