"""Acceptance criteria, one test each; every test logs a PASS/FAIL line."""

import json
import math
import time

import numpy as np

from acceptance_log import report
from gradcheck import numeric_grad, rel_err, sampled_check
from selfvitmil import cli, dino, evaluate as ev, mil, preprocess as pp, tensor as T, vit
from selfvitmil.dino import DinoConfig, DinoState
from selfvitmil.mil import MilModel
from selfvitmil.tensor import Tensor
from selfvitmil.vit import ViTConfig, ViTModel


def _tensor_case(rng):
    arrays = [rng.normal(size=(2, 3)), rng.normal(size=(3, 4)), rng.normal(size=4), rng.normal(size=4)]

    def f(x, w, g, b):
        h = T.layer_norm(T.matmul(x, w), g, b)
        h = T.gelu(h) + T.tanh(h) * 0.5 + T.sigmoid(h) * T.exp(h * 0.1)
        logp = T.log_softmax(h, 0.5)
        p = T.softmax(h[:, :3], 1.3)
        cat = T.transpose(T.reshape(T.concat([logp, p], axis=1), (7, 2)))
        return (cat * cat).mean() + T.binary_cross_entropy_with_logits(h[0, 1], 1.0) \
            + T.log(T.power(x * x + 1.0, 1.5)).sum()

    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    f(*tensors).backward()
    numeric = numeric_grad(lambda *a: f(*(Tensor(x) for x in a)).item(), arrays)
    return max(rel_err(t.grad, n) for t, n in zip(tensors, numeric))


def _vit_case(rng, seed):
    cfg = ViTConfig.desk()
    m = ViTModel.init(cfg, seed=seed)
    imgs = rng.normal(size=(2, 3, cfg.image_size, cfg.image_size))
    r = rng.normal(size=(2, cfg.num_blocks, cfg.embed_dim))
    return sampled_check(lambda: (vit.forward(imgs, m) * Tensor(r)).sum(), m.params, rng, per_tensor=2)


def _dino_case(rng, seed):
    cfg = DinoConfig(n_local=2)
    st = DinoState.init(ViTConfig.desk(), cfg, seed=seed)
    st.step = 10 ** 6  # past the temperature warm-up
    tile = rng.integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    views = dino.make_views(tile, seed, cfg)
    return sampled_check(lambda: dino.dino_loss(views, st), st.student.named(), rng, per_tensor=1)


def _mil_case(rng, seed):
    k = 80
    m = MilModel.init(k, 16, seed)
    for name in ("W_p", "W_b"):
        m.params[name].data[:] = rng.uniform(-0.1, 0.1, size=(1, k))
    h = Tensor(rng.normal(size=(int(rng.integers(1, 30)), k)))
    y = int(rng.integers(2))

    def loss():
        _, _, c_m, _, _, c_b = mil.forward(h, m)
        return mil.mil_loss(c_m, c_b, y)

    return sampled_check(loss, m.params, rng, per_tensor=5)


def test_1_gradient_suite():
    rng = np.random.default_rng(0)
    start = time.time()
    errors = {"tensor": [_tensor_case(rng) for _ in range(50)],
              "vit": [_vit_case(rng, s) for s in range(20)],
              "dino": [_dino_case(rng, s) for s in range(15)],
              "mil": [_mil_case(rng, s) for s in range(30)]}
    elapsed = time.time() - start
    n = sum(len(v) for v in errors.values())
    worst = max(max(v) for v in errors.values())
    ok = worst < 1e-4 and n >= 100 and elapsed < 300
    per = ", ".join(f"{k} {max(v):.1e}" for k, v in errors.items())
    report("1 gradient suite", ok, f"{n} cases, worst rel err {worst:.1e} ({per}), {elapsed:.0f} s")
    assert ok


def _otsu_exhaustive(hist):
    """Exact search over all 256 thresholds with integer cross-multiplication."""
    h = [int(c) for c in hist]
    n = sum(h)
    s = sum(i * c for i, c in enumerate(h))
    best_num, best_den, best_t = -1, 1, 0
    n0 = s0 = 0
    for t in range(256):
        n0 += h[t]
        s0 += t * h[t]
        n1 = n - n0
        # n^2 * var_b = (n * s0 - n0 * s)^2 / (n0 * n1); zero when a class is empty
        num, den = ((n * s0 - n0 * s) ** 2, n0 * n1) if n0 and n1 else (0, 1)
        if num * best_den > best_num * den:
            best_num, best_den, best_t = num, den, t
    return best_t


def _pairwise_auc(scores, labels):
    pos, neg = scores[labels == 1], scores[labels == 0]
    diff = pos[:, None] - neg[None, :]
    twice = 2 * int((diff > 0).sum()) + int((diff == 0).sum())
    return twice / (2 * len(pos) * len(neg))


def test_2_oracle_suite():
    rng = np.random.default_rng(0)
    otsu_bad = 0
    for i in range(1000):
        kind = i % 3
        if kind == 0:
            h = rng.integers(0, 50, size=256)
        elif kind == 1:
            h = np.bincount(np.clip(rng.normal(rng.uniform(0, 255), rng.uniform(2, 40), 1000).round(), 0, 255)
                            .astype(int), minlength=256)
            h += np.bincount(np.clip(rng.normal(rng.uniform(0, 255), rng.uniform(2, 40), 700).round(), 0, 255)
                             .astype(int), minlength=256)
        else:
            h = np.zeros(256, dtype=int)
            h[rng.choice(256, size=rng.integers(1, 6), replace=False)] = rng.integers(1, 20)
        otsu_bad += pp.otsu_threshold(h) != _otsu_exhaustive(h)
    auc_worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 201))
        labels = rng.integers(0, 2, size=n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 8, size=n).astype(float) if rng.random() < 0.5 else rng.normal(size=n)
        auc_worst = max(auc_worst, abs(ev.roc_auc(scores, labels).auc - _pairwise_auc(scores, labels)))
    ok = otsu_bad == 0 and auc_worst <= 1e-12
    report("2 oracle suite", ok, f"otsu mismatches {otsu_bad}/1000, max |auc - pairwise| {auc_worst:.1e} over 1000")
    assert ok


def test_3_mil_algebra():
    rng = np.random.default_rng(0)
    perm_err = norm_err = 0.0
    for seed in range(500):
        m = MilModel.init(12, 8, seed)
        m.params["W_p"].data[:] = rng.normal(size=(1, 12))
        m.params["W_b"].data[:] = rng.normal(size=(1, 12))
        h = rng.normal(size=(int(rng.integers(1, 60)), 12)) * rng.uniform(0.1, 5)
        perm = rng.permutation(len(h))
        a, b = mil.predict(h, m), mil.predict(h[perm], m)
        perm_err = max(perm_err, abs(a.final_score - b.final_score), np.abs(b.attention - a.attention[perm]).max())
        norm_err = max(norm_err, abs(a.attention.sum() - 1.0))
    same = np.tile(rng.normal(size=(1, 12)), (7, 1))
    p = mil.predict(same, m)
    uniform_ok = bool(np.all(p.attention == p.attention[0])) and abs(p.attention[0] - 1 / 7) < 1e-15
    tie_ok = p.critical_index == 0 and mil.instance_stream(np.vstack([h[:1], h[:1]]), m)[1] == 0
    ok = perm_err <= 1e-12 and norm_err <= 1e-9 and uniform_ok and tie_ok
    report("3 MIL algebra", ok, f"perm err {perm_err:.1e}, |sum s - 1| {norm_err:.1e}, "
                                f"uniform attention {uniform_ok}, first-index tie-break {tie_ok}")
    assert ok


def _ablation_tiles(n=2000):
    tiles, seed = [], 0
    while len(tiles) < n:
        rng = np.random.default_rng(seed)
        positive = seed % 2 == 1
        cells = [tuple(int(v) for v in rng.integers(0, 8, 2))] if positive else []
        tiles += pp.filter_tiles(pp.synth_slide(seed, (8, 8), positive, cells), 32).tiles
        seed += 1
    return tiles[:n]


def test_4_dino_behaviour():
    # (a) no teacher gradient
    cfg = DinoConfig(n_local=2)
    st = DinoState.init(ViTConfig.desk(), cfg, seed=0)
    tile = np.random.default_rng(0).integers(0, 256, size=(32, 32, 3), dtype=np.uint8)
    dino.dino_loss(dino.make_views(tile, 0, cfg), st).backward()
    no_teacher_grad = all(p.grad is None for p in st.teacher.parameters())

    # (b) EMA contraction
    rng = np.random.default_rng(1)
    for p in st.student.parameters():
        p.data += rng.normal(size=p.shape)
    gaps = [np.abs(t.data - s.data) for t, s in zip(st.teacher.parameters(), st.student.parameters())]
    dino.ema_update(st, 0.9995)
    ema_err = max(float(np.abs(np.abs(t.data - s.data) - 0.9995 * g).max())
                  for g, t, s in zip(gaps, st.teacher.parameters(), st.student.parameters()))

    # (c) centering ablation
    tiles = _ablation_tiles()
    vit_cfg = ViTConfig(num_blocks=2)
    log_k = math.log(32)
    start = time.time()
    final = {}
    for centering in (True, False):
        abl = DinoConfig(out_dim=32, centering=centering, batch_size=8, epochs=20, warmup_epochs=2)
        trace = dino.pretrain(tiles, vit_cfg, abl, seed=0).trace
        per_epoch = len(trace) // abl.epochs
        final[centering] = float(np.mean([r["teacher_entropy"] for r in trace[-per_epoch:]])) / log_k
    elapsed = time.time() - start
    ok = no_teacher_grad and ema_err < 1e-12 and final[False] < 0.10 and final[True] > 0.50 and elapsed < 900
    report("4 DINO behaviour", ok,
           f"teacher grads absent {no_teacher_grad}, EMA err {ema_err:.1e}, entropy/logK centering on "
           f"{final[True]:.3f} off {final[False]:.3f}, ablation {elapsed:.0f} s")
    assert ok


def test_5_end_to_end(tmp_path):
    w = tmp_path
    start = time.time()
    steps = [
        ["synth", "--seed", "7", "--n-slides", "200", "--grid", "8x8", "--positive-fraction", "0.5",
         "--out", w / "corpus"],
        ["tile", "--slides", w / "corpus" / "slides", "--out", w / "tiles"],
        ["pretrain", "--tiles", w / "tiles", "--split", w / "corpus" / "train.csv", "--seed", "0",
         "--out", w / "pre"],
        ["embed", "--tiles", w / "tiles", "--checkpoint", w / "pre" / "teacher.ckpt", "--out", w / "emb"],
        ["train-mil", "--embeddings", w / "emb", "--labels", w / "corpus" / "train.csv", "--seed", "0",
         "--out", w / "mil"],
        ["eval", "--model", w / "mil" / "mil.ckpt", "--embeddings", w / "emb",
         "--labels", w / "corpus" / "test.csv", "--out", w / "eval"],
    ]
    codes = [cli.main([str(a) for a in argv]) for argv in steps]
    elapsed = time.time() - start
    cfg = cli.RunConfig.desk()
    m = json.loads((w / "eval" / "metrics.json").read_text()) if codes[-1] == 0 else {}
    ok = (codes == [0] * 6 and cfg.dino["epochs"] <= 30 and cfg.mil["epochs"] == 50
          and m["auc"] >= 0.95 and m["accuracy"] >= 0.90 and m["localization_hit_rate"] >= 0.90
          and elapsed <= 3600)
    report("5 end-to-end", ok, f"AUC {m.get('auc', float('nan')):.3f}, accuracy {m.get('accuracy', float('nan')):.3f}, "
                               f"hit rate {m.get('localization_hit_rate', float('nan')):.3f} on "
                               f"{m.get('n_test')} held-out slides, {elapsed:.0f} s")
    assert ok


def test_6_paper_shapes():
    cfg = ViTConfig.vit_b16()
    m = ViTModel.init(cfg, seed=0)
    img = np.random.default_rng(0).uniform(size=(3, 224, 224))
    tokens = vit.tokenize(img, m)
    feats = vit.extract_features(img, m)
    ok = cfg.num_patches == 196 and tokens.shape == (197, 768) and feats.shape == (3840,) \
        and bool(np.isfinite(feats).all())
    report("6 paper shapes", ok, f"tokens {tokens.shape}, features {feats.shape}")
    assert ok


def test_7_schedules():
    d = cli.RunConfig.paper().dino_config()
    total, warm = 1000, 100
    got = {
        "lr start": dino.lr_at(0, total, warm, d.lr_min, d.lr_max),
        "lr peak": dino.lr_at(warm, total, warm, d.lr_min, d.lr_max),
        "lr end": dino.lr_at(total, total, warm, d.lr_min, d.lr_max),
        "tau_t warm-up": dino.teacher_temp_at(0, warm, d.teacher_temp_warmup, d.teacher_temp),
        "tau_t after": dino.teacher_temp_at(warm, warm, d.teacher_temp_warmup, d.teacher_temp),
        "lambda start": dino.ema_at(0, total, d.ema_start),
        "lambda end": dino.ema_at(total, total, d.ema_start),
    }
    want = {"lr start": 1e-6, "lr peak": 5e-4, "lr end": 1e-6, "tau_t warm-up": 0.01, "tau_t after": 0.04,
            "lambda start": 0.9995, "lambda end": 1.0}
    ok = got == want
    report("7 schedules", ok, ", ".join(f"{k} {v:g}" for k, v in got.items()))
    assert ok
