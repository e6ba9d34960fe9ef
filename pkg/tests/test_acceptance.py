"""Acceptance suite: one test per criterion, each reported as a PASS/FAIL line.

The expensive pieces (five seeds of leave-one-out training per holdout) are
session fixtures shared by criteria 6-9. Run just this file with
``pytest tests/test_acceptance.py -v``.
"""
import time

import numpy as np
import pytest

from iqeclip import autodiff as ad
from iqeclip.autodiff import Tensor, grad_check
from iqeclip.cli import main as cli
from iqeclip.config import RunConfig
from iqeclip.data import list_domains, load_domain
from iqeclip.losses import segmentation_losses
from iqeclip.metrics import auroc, evaluate_model
from iqeclip.model import IQEClip
from iqeclip.nn import FFN, Adam, AttentionWithBias, checksum
from iqeclip.scoring import fuse, layer_map
from iqeclip.training import build_bank, few_shot_adapt, run_epochs, source_bank, train_zero_shot

from conftest import directional_grad_error, tiny_config
from test_autodiff import DIFFERENTIABLE
from test_metrics import _instance, pairwise_auroc

pytestmark = pytest.mark.slow

SEEDS = range(5)
TARGET = "checker"    # holdout used for the few-shot and ablation trends
SHOTS = (2, 4, 8, 16)
ALPHAS = (0.0, 0.2, 0.5, 0.8, 1.0)
ABLATIONS = ("disable_cpt", "disable_lpt", "disable_iqm", "disable_query_init")


def _report(request, passed, detail):
    request.node.detail = detail
    print(f"\n{'PASS' if passed else 'FAIL'}: {detail}")
    assert passed, detail


# ---------------------------------------------------------------------------
# shared training runs
# ---------------------------------------------------------------------------

class Runs:
    """Lazily trained leave-one-out models, cached for the whole session."""

    def __init__(self, root):
        self.root = root
        self.probe = IQEClip(RunConfig())
        self._source, self._test, self._zs = {}, {}, {}

    def source(self, holdout):
        # encoder features depend only on the backbone seed, so one bank serves every run
        if holdout not in self._source:
            self._source[holdout] = source_bank(self.probe, self.root, holdout)
        return self._source[holdout]

    def test_bank(self, domain):
        if domain not in self._test:
            self._test[domain] = build_bank(self.probe, load_domain(self.root, domain), "test")
        return self._test[domain]

    def evaluate(self, model, domain, seed=0, map_alpha=None):
        return evaluate_model(model, self.root, domain, seed, map_alpha, bank=self.test_bank(domain))

    def train(self, holdout, seed, **overrides):
        cfg = RunConfig(seed=seed).replace(**overrides)
        start = time.perf_counter()
        model, history = train_zero_shot(cfg, self.root, holdout, bank=self.source(holdout))
        result = self.evaluate(model, holdout, seed)
        return model, history, result, time.perf_counter() - start

    def zero_shot(self, holdout, seed):
        key = (holdout, seed)
        if key not in self._zs:
            model, history, result, seconds = self.train(holdout, seed)
            state = {n: p.data.copy() for n, p in model.named_parameters()}
            self._zs[key] = (model, state, history, result, seconds)
        return self._zs[key]

    def restored(self, holdout, seed):
        model, state, *_ = self.zero_shot(holdout, seed)
        for n, p in model.named_parameters():
            p.data = state[n].copy()
        return model


@pytest.fixture(scope="session")
def runs(default_data):
    return Runs(default_data)


# ---------------------------------------------------------------------------
# 1-5: properties
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(request):
    start = time.perf_counter()
    worst = {}
    with ad.verification_mode():
        for seed in range(10):
            rng = np.random.default_rng(seed)
            for name, (fn, make) in DIFFERENTIABLE.items():
                worst[name] = max(worst.get(name, 0.0), grad_check(fn, make(seed), seed=seed))

            attn = AttentionWithBias(8, 2, np.random.default_rng(seed), bias_shape=(3, 5))

            def attention(q, k, v, bias, attn=attn):
                attn.bias_table = bias
                return attn(q, k, v)

            worst["attention"] = max(worst.get("attention", 0.0), grad_check(
                attention, [rng.normal(size=(3, 8)), rng.normal(size=(5, 8)), rng.normal(size=(5, 8)),
                            rng.normal(size=(3, 5))], seed=seed))
            ffn = FFN(8, 16, np.random.default_rng(seed))
            worst["ffn"] = max(worst.get("ffn", 0.0), grad_check(
                ffn, [rng.normal(size=(3, 8)), rng.normal(size=(3, 8))], seed=seed))
            worst["layer_map"] = max(worst.get("layer_map", 0.0), grad_check(
                lambda a, e: layer_map(a, e, (6, 5)), [rng.normal(size=(4, 5)), rng.normal(size=(2, 5))],
                seed=seed))
            mask = (rng.uniform(size=(2, 6, 6)) < 0.3).astype(float)
            label = np.array([1.0, 0.0])
            pred = rng.uniform(0.05, 0.95, size=(2, 6, 6))
            for part, tag in enumerate(("focal", "dice", "bce")):
                worst[tag] = max(worst.get(tag, 0.0), grad_check(
                    lambda p, part=part: segmentation_losses(p, mask, label)[part], [pred], seed=seed))

            model = IQEClip(tiny_config(seed=seed))
            images = rng.uniform(size=(2, 16, 16))
            masks = np.zeros((2, 16, 16))
            masks[0, 5:9, 3:8] = 1.0
            feats = model.encode_image(images)
            loss = lambda: model.loss(feats.features, feats.x_cls, ["tile", "tile"], masks, [1.0, 0.0])
            worst["total_loss"] = max(worst.get("total_loss", 0.0), directional_grad_error(
                loss, list(model.trainable().values()), seed=seed))
    seconds = time.perf_counter() - start
    composite = worst.pop("total_loss")
    op, op_err = max(worst.items(), key=lambda kv: kv[1])
    passed = op_err < 1e-4 and composite < 1e-3 and seconds < 120
    _report(request, passed, f"worst op {op} {op_err:.2e} (<1e-4), total_loss {composite:.2e} (<1e-3), "
                             f"{len(worst) + 1} checks x 10 seeds in {seconds:.1f}s (<120s)")


def _groups(model):
    return {
        "image_encoder": list(model.image_encoder.named_parameters()),
        "text_encoder": list(model.text_encoder.named_parameters()),
        "context": [("v", model.prompts.context)],
        "cpt": list(model.prompts.cpt.named_parameters()),
        "lpt": [(str(i), t) for i, t in enumerate(model.prompts.lpt)],
        "query_init": list(model.iqm.query_init.named_parameters()),
        "adapters": [(f"{i}.{n}", p) for i, a in enumerate(model.iqm.adapters) for n, p in a.named_parameters()],
        "iqm_blocks": [(f"{i}.{n}", p) for i, b in enumerate(model.iqm.blocks)
                       for n, p in b.named_parameters() if not n.endswith("bias_table")],
        "bias_tables": [(f"{i}.{n}", p) for i, b in enumerate(model.iqm.blocks)
                        for n, p in b.named_parameters() if n.endswith("bias_table")],
    }


def test_criterion_2_freeze_invariant(request, runs):
    cfg = RunConfig()
    model = IQEClip(cfg)
    before = {k: checksum(v) for k, v in _groups(model).items()}
    bank = runs.source(TARGET).take(range(0, 20 * 8 * 3, 3))   # spans both source domains
    opt = Adam(model.trainable(), lr=cfg.lr)
    run_epochs(model, bank, 1, cfg.replace(batch=8), opt=opt)
    after = {k: checksum(v) for k, v in _groups(model).items()}
    frozen_ok = all(after[k] == before[k] for k in ("image_encoder", "text_encoder"))
    moved = [k for k in before if k not in ("image_encoder", "text_encoder") and after[k] != before[k]]
    stuck = [k for k in before if k not in ("image_encoder", "text_encoder") and k not in moved]
    passed = opt.step_count == 20 and frozen_ok and not stuck
    _report(request, passed, f"{opt.step_count} steps; encoders unchanged={frozen_ok}; "
                             f"trainable groups changed {len(moved)}/{len(moved) + len(stuck)}"
                             + (f" (stuck: {stuck})" if stuck else ""))


def test_criterion_3_map_algebra(request, runs):
    model = IQEClip(RunConfig(seed=0))
    bank = runs.test_bank(TARGET).take(range(0, 100, 10))
    x_cls = Tensor(bank.x_cls)
    trunk = model.prompts.cpt.shared(x_cls)
    text = model.prompts.encode(model.prompts.class_ids(bank.class_words), trunk)
    adapted = model.iqm.adapt_features(bank.stages)
    size = (64, 64)
    in_range, complement, scale = True, 0.0, 0.0
    for a in adapted:
        m = layer_map(a, text, size).data
        in_range &= bool(((m > 0) & (m < 1)).all())
        swapped = layer_map(a, text.data[..., ::-1, :], size).data
        complement = max(complement, float(np.abs(m + swapped - 1).max()))
        scaled = layer_map(a, text.data * np.array([3.7, 0.02])[:, None], size).data
        scale = max(scale, float(np.abs(scaled - m).max()))
    maps_text, maps_query = model.forward_maps(bank.stages, bank.x_cls, bank.class_words)
    mt, mq = [m.data for m in maps_text], [m.data for m in maps_query]
    in_range &= all(((m > 0) & (m < 1)).all() for m in mq)
    endpoints = np.array_equal(fuse(mq, mt, 1.0), sum(mq)) and np.array_equal(fuse(mq, mt, 0.0), sum(mt))
    passed = in_range and complement <= 1e-6 and endpoints and scale <= 1e-6
    _report(request, passed, f"maps in (0,1)={in_range}; complement err {complement:.1e} (<=1e-6); "
                             f"fuse endpoints exact={endpoints}; rescale err {scale:.1e}")


def test_criterion_4_auroc_oracle(request):
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(200):
        scores, labels = _instance(rng)
        worst = max(worst, abs(auroc(scores, labels) - pairwise_auroc(scores, labels)))
    example = auroc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1])
    _report(request, worst <= 1e-12 and example == 0.75,
            f"max |rank - pairwise| over 200 tied instances {worst:.1e} (<=1e-12); worked example {example}")


def test_criterion_5_residual_identity(request, runs):
    model = IQEClip(RunConfig(), zero_out=True)
    bank = runs.test_bank(TARGET).take(range(8))
    x_cls = Tensor(bank.x_cls)
    trunk = model.prompts.cpt.shared(x_cls)
    text = model.prompts.encode(model.prompts.class_ids(bank.class_words), trunk)
    q0 = model.iqm.init_query(trunk)
    out = model.iqm.run(q0, text, model.iqm.adapt_features(bank.stages))
    iqm_ok = out.data.tobytes() == q0.data.tobytes()
    ffn = FFN(64, 128, np.random.default_rng(0), zero_out=True)
    rng = np.random.default_rng(1)
    x, r = Tensor(rng.normal(size=(5, 64))), Tensor(rng.normal(size=(5, 64)))
    ffn_ok = ffn(x, r).data.tobytes() == r.data.tobytes()
    _report(request, iqm_ok and ffn_ok, f"run_iqm(q0)==q0 bitwise: {iqm_ok}; ffn(x, r)==r bitwise: {ffn_ok}")


# ---------------------------------------------------------------------------
# 6-9: synthetic benchmark trends
# ---------------------------------------------------------------------------

def test_criterion_6_zero_shot(request, runs):
    lines, passed = [], True
    for holdout in list_domains(runs.root):
        results = [runs.zero_shot(holdout, s) for s in SEEDS]
        ac = np.mean([r[3].ac_auroc for r in results])
        as_ = np.mean([r[3].as_auroc for r in results])
        slowest = max(r[4] for r in results)
        falling = all(r[2][-1][1] < r[2][0][1] for r in results)
        ok = ac >= 0.85 and as_ >= 0.90 and slowest < 15 * 60 and falling
        passed &= ok
        lines.append(f"{holdout} AC {ac:.4f} AS {as_:.4f} max run {slowest:.0f}s{'' if falling else ' loss-not-falling'}")
    _report(request, passed, "; ".join(lines) + " (targets AC>=0.85, AS>=0.90, <900s per run)")


def test_criterion_7_few_shot(request, runs):
    base = np.mean([runs.zero_shot(TARGET, s)[3].ac_auroc for s in SEEDS])
    curve = {}
    for k in SHOTS:
        scores = []
        for seed in SEEDS:
            model = runs.restored(TARGET, seed)
            adapted, _, _ = few_shot_adapt(model, runs.root, TARGET, k, source=runs.source(TARGET))
            scores.append(runs.evaluate(adapted, TARGET, seed).ac_auroc)
        curve[k] = float(np.mean(scores))
    runs.restored(TARGET, 0)
    gain = curve[4] - base
    monotone = all(curve[a] <= curve[b] for a, b in zip(SHOTS, SHOTS[1:]))
    text = ", ".join(f"K={k} {v:.4f}" for k, v in curve.items())
    _report(request, gain >= 0.02 and monotone,
            f"{TARGET}: zero-shot AC {base:.4f}; {text}; K=4 gain {gain:+.4f} (>=0.02); non-decreasing={monotone}")


def test_criterion_8_ablations(request, runs):
    full = np.mean([runs.zero_shot(TARGET, s)[3].ac_auroc for s in SEEDS])
    means = {}
    for flag in ABLATIONS:
        means[flag] = float(np.mean([runs.train(TARGET, s, **{flag: True})[2].ac_auroc for s in SEEDS]))
    worse = [f for f, v in means.items() if v < full]
    text = ", ".join(f"{f} {v:.4f}" for f, v in means.items())
    _report(request, len(worse) == len(ABLATIONS), f"{TARGET}: full AC {full:.4f}; {text}; "
                                                   f"{len(worse)}/{len(ABLATIONS)} reduce AC")


def test_criterion_9_alpha_sweep(request, runs):
    curve = {}
    for alpha in ALPHAS:
        ac, as_ = [], []
        for holdout in list_domains(runs.root):
            for seed in SEEDS:
                r = runs.evaluate(runs.zero_shot(holdout, seed)[0], holdout, seed, map_alpha=alpha)
                ac.append(r.ac_auroc)
                as_.append(r.as_auroc)
        curve[alpha] = (float(np.mean(ac)), float(np.mean(as_)))
    better = [a for a in ALPHAS if a > 0 and curve[a][0] > curve[0.0][0]]
    best = max(ALPHAS, key=lambda a: curve[a][0])
    text = ", ".join(f"a={a} AC {v[0]:.4f}/AS {v[1]:.4f}" for a, v in curve.items())
    _report(request, bool(better), f"{text}; best AC at alpha={best}; beats alpha=0: {better}")


# ---------------------------------------------------------------------------
# 10: end-to-end determinism through the command line
# ---------------------------------------------------------------------------

def _pipeline(root, cfg_path):
    data, ckpt, report = root / "data", root / "model.iqec", root / "report.csv"
    assert cli(["gen-data", "--out", str(data), "--seed", "0"]) == 0
    assert cli(["train", "--data", str(data), "--holdout", TARGET, "--config", str(cfg_path),
                "--out", str(ckpt)]) == 0
    assert cli(["eval", "--ckpt", str(ckpt), "--data", str(data), "--domain", TARGET, "--seeds", "5",
                "--report", str(report), "--no-timing"]) == 0
    return ckpt.read_bytes(), report.read_bytes()


def test_criterion_10_determinism(request, tmp_path):
    cfg_path = tmp_path / "run.cfg"
    RunConfig(epochs=3).save(cfg_path)
    (tmp_path / "a").mkdir()
    (tmp_path / "b").mkdir()
    ckpt_a, report_a = _pipeline(tmp_path / "a", cfg_path)
    ckpt_b, report_b = _pipeline(tmp_path / "b", cfg_path)
    same_ckpt, same_report = ckpt_a == ckpt_b, report_a == report_b
    _report(request, same_ckpt and same_report,
            f"checkpoints identical={same_ckpt} ({len(ckpt_a)} bytes); reports identical={same_report}")
