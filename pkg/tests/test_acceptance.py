"""Acceptance suite. Each test carries a ``criterion`` marker; the terminal
summary prints one PASS/FAIL line per criterion.

Criteria 8, 9 and 11 share one trained model (default config, 8-item
synthetic dataset), trained once per session through the CLI.
"""

import colorsys
import json
import math
import time

import numpy as np
import pytest
import torch

from jmvr.augment import ImageAutoencoder, LuminanceDepth, augment, fuse_to_latent
from jmvr.block import MODALITIES, JMVRBlock, gate_schedule, gate_weights, modulate
from jmvr.cli import main
from jmvr.conditioning import Conditioner
from jmvr.data import (
    DatasetManifest, EEGRecording, PreprocessConfig, bandpass, baseline_correct, gen_synthetic,
    load_preprocessed, preprocess_recording,
)
from jmvr.encoder import EEGEncoder, EncoderConfig, pmsp_pool
from jmvr.experiments import mask_sweep, reconstruct
from jmvr.metrics import Histogram, deep_emd, emd, lab_emd, pixcorr, resize, ssim
from jmvr.train import load_model, load_split

from conftest import gradcheck_params

criterion = pytest.mark.criterion


# --------------------------------------------------------------------------
# 1. gate schedule


@criterion(1, "gate schedule sums to one, endpoints, monotone")
def test_gate_schedule():
    t0 = time.perf_counter()
    T = 1000
    states = [gate_schedule(tau, T) for tau in range(T + 1)]
    lt = np.array([s.lambda_txt for s in states])
    le = np.array([s.lambda_eeg for s in states])
    assert np.max(np.abs(lt + le - 1.0)) <= 1e-12
    assert abs(lt[0]) <= 1e-12 and abs(lt[-1] - 1.0) <= 1e-12
    assert np.all(np.diff(lt) > 0) and np.all(np.diff(le) < 0)
    batched = gate_weights(torch.arange(T + 1), T).numpy()
    assert np.max(np.abs(batched[:, 1] - lt)) <= 1e-12
    assert np.max(np.abs(batched[:, 2] - le)) <= 1e-12
    assert np.all(batched[:, 0] == 1.0)
    assert time.perf_counter() - t0 < 1.0


# --------------------------------------------------------------------------
# 2. PMSP


def window_means(x: np.ndarray, m: int) -> np.ndarray:
    T = len(x)
    out = []
    for k in range(1, m + 1):
        w = T // 2 ** k
        out.extend(x[i * w:(i + 1) * w].mean() for i in range(2 ** k))
    return np.array(out)


@criterion(2, "PMSP length, per-scale means, window-mean oracle")
def test_pmsp():
    t0 = time.perf_counter()
    for T in (16, 64, 256):
        m = int(math.log2(T)) - 1
        for seed in range(100):
            rng = np.random.default_rng([T, seed])
            x = rng.normal(size=(3, T))
            out = pmsp_pool(torch.as_tensor(x), m).numpy()
            assert out.shape == (3, T - 2)
            start = 0
            for k in range(1, m + 1):
                n = 2 ** k
                assert np.max(np.abs(out[:, start:start + n].mean(axis=1) - x.mean(axis=1))) <= 1e-9
                start += n
            # real-valued inputs: only the summation order differs from the oracle
            assert np.max(np.abs(out[0] - window_means(x[0], m))) <= 1e-12
            # integer-valued inputs: every window sum is exact, so the match is bitwise
            xi = rng.integers(-1000, 1000, size=T).astype(np.float64)
            assert np.array_equal(pmsp_pool(torch.as_tensor(xi)[None], m)[0].numpy(), window_means(xi, m))
    assert time.perf_counter() - t0 < 5.0


# --------------------------------------------------------------------------
# 3. joint attention oracle


D, HEADS = 16, 4


def randomized_block(seed=0):
    torch.manual_seed(seed)
    block = JMVRBlock(D, HEADS)
    g = torch.Generator().manual_seed(seed + 1)
    for m in MODALITIES:
        lin = block.streams[m].ada[1]
        with torch.no_grad():
            lin.weight.copy_(0.3 * torch.randn(lin.weight.shape, generator=g))
            lin.bias.copy_(0.3 * torch.randn(lin.bias.shape, generator=g))
    return block


def token_streams(B=2, lengths=(6, 3, 5), seed=0):
    g = torch.Generator().manual_seed(seed)
    return tuple(torch.randn(B, L, D, generator=g) for L in lengths)


def vanilla_block(p, x, c):
    sh, sc, ga, sh2, sc2, gm = p.modulation(c)
    B = x.shape[0]
    h = modulate(p.norm1(x), sh, sc)
    q, k, v = (lin(h).reshape(B, -1, HEADS, D // HEADS).transpose(1, 2) for lin in (p.q, p.k, p.v))
    a = torch.softmax(q @ k.transpose(-1, -2) / math.sqrt(D // HEADS), dim=-1) @ v
    x = x + ga[:, None] * p.proj(a.transpose(1, 2).reshape(B, -1, D))
    return x + gm[:, None] * p.mlp(modulate(p.norm2(x), sh2, sc2))


@criterion(3, "tied joint attention equals vanilla attention; adaLN-zero stack is identity")
def test_joint_attention_oracle():
    t0 = time.perf_counter()
    for seed in range(5):
        block = randomized_block(seed)
        for m in ("txt", "eeg"):
            block.streams[m].load_state_dict(block.streams["img"].state_dict())
        hs = token_streams(seed=seed)
        c = torch.randn(2, D, generator=torch.Generator().manual_seed(100 + seed))
        outs = block(hs, c, torch.ones(2, 3))
        ref = vanilla_block(block.streams["img"], torch.cat(hs, dim=1), c)
        start = 0
        for o, h in zip(outs, hs):
            assert (o - ref[:, start:start + h.shape[1]]).abs().max() < 1e-6
            start += h.shape[1]

    torch.manual_seed(0)
    stack = [JMVRBlock(D, HEADS) for _ in range(4)]
    hs = token_streams()
    c = torch.randn(2, D)
    lam = gate_weights(torch.tensor([10, 900]), 1000)
    out = hs
    for b in stack:
        out = b(out, c, lam)
    for a, b in zip(out, hs):
        assert torch.equal(a, b)
    assert time.perf_counter() - t0 < 10.0


# --------------------------------------------------------------------------
# 4. gradient checks


def check_block():
    block = randomized_block(3)
    hs = token_streams(seed=3)
    c = torch.randn(2, D, generator=torch.Generator().manual_seed(4))
    lam = gate_weights(torch.tensor([250, 800]), 1000)
    loss = lambda: sum(o.pow(2).mean() for o in block(hs, c, lam))
    return gradcheck_params(loss, list(block.parameters()), n_coords=12)


def check_encoder():
    cfg = EncoderConfig(C=6, T=64, D=16, m=5, n_eeg_tokens=8, n_filters=2)
    torch.manual_seed(1)
    enc = EEGEncoder(cfg)
    for b in enc.stream.blocks:
        torch.nn.init.normal_(b.conv2.weight, std=0.1)
    x = torch.randn(2, 6, 64, generator=torch.Generator().manual_seed(2))
    target = torch.randn(2, 8, 16, generator=torch.Generator().manual_seed(3))
    loss = lambda: ((enc(x) - target) ** 2).mean()
    return gradcheck_params(loss, list(enc.parameters()), n_coords=12)


def check_conditioning():
    torch.manual_seed(0)
    cond = Conditioner(8, 8)
    coarse = torch.randn(2, 8)
    eeg = torch.randn(2, 3, 8)
    tau = torch.tensor([3, 700])
    loss = lambda: cond.condition_vector(tau, coarse, eeg).c.pow(2).sum()
    return gradcheck_params(loss, list(cond.parameters()), n_coords=12)


def check_fuse():
    torch.manual_seed(0)
    ae = ImageAutoencoder(16, 4, 8, 4)
    s = augment(np.random.default_rng(1).random((16, 16, 3)), LuminanceDepth())
    target = torch.randn(16, 8, generator=torch.Generator().manual_seed(2))
    loss = lambda: ((fuse_to_latent(s, ae) - target) ** 2).mean()
    return gradcheck_params(loss, list(ae.embed.parameters()) + list(ae.fuse.parameters()), n_coords=12)


@criterion(4, "finite-difference gradient checks (block, encoder, conditioning, fuse)")
def test_gradient_checks():
    assert torch.get_default_dtype() == torch.float64
    t0 = time.perf_counter()
    errs = {"block": check_block(), "encoder": check_encoder(), "conditioning": check_conditioning(),
            "fuse_to_latent": check_fuse()}
    print(errs)
    assert all(e < 1e-4 for e in errs.values()), errs
    assert time.perf_counter() - t0 < 120.0


# --------------------------------------------------------------------------
# 5. optimal transport


def random_histogram(rng, n_bins=None, dim=3):
    n = n_bins or int(rng.integers(3, 7))
    return Histogram(rng.dirichlet(np.ones(n)), rng.random((n, dim)), "r3")


@criterion(5, "EMD metric axioms, Sinkhorn within 2%, point mass")
def test_optimal_transport():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    for _ in range(200):
        x, y, z = (random_histogram(rng) for _ in range(3))
        dxy, dyx = emd(x, y)[0], emd(y, x)[0]
        dxz, dyz = emd(x, z)[0], emd(y, z)[0]
        assert dxy > 0 and dxz > 0 and dyz > 0
        assert emd(x, x)[0] <= 1e-9
        assert abs(dxy - dyx) <= 1e-9
        assert dxz <= dxy + dyz + 1e-9

    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        pts = rng.random((6, 3))
        a = Histogram(rng.dirichlet(np.ones(6)), pts, "r3")
        b = Histogram(rng.dirichlet(np.ones(6)), pts, "r3")
        exact, approx = emd(a, b)[0], emd(a, b, "sinkhorn")[0]
        worst = max(worst, abs(approx - exact) / exact)
    print(f"worst Sinkhorn relative error {worst:.4f}")
    assert worst <= 0.02

    for d in (0.5, 1.0, 3.0, 17.25):
        p = Histogram([1.0], [[0.0, 0.0, 0.0]], "r3")
        q = Histogram([1.0], [[d * 0.6, d * 0.8, 0.0]], "r3")
        assert abs(emd(p, q)[0] - d) <= 1e-9
    assert time.perf_counter() - t0 < 60.0


# --------------------------------------------------------------------------
# 6. LabEMD


def hue_rotated(img, degrees):
    flat = img.reshape(-1, 3)
    out = np.array([colorsys.hsv_to_rgb((h + degrees / 360.0) % 1.0, s, v)
                    for h, s, v in (colorsys.rgb_to_hsv(*px) for px in flat)])
    return out.reshape(img.shape)


@criterion(6, "LabEMD increases with hue rotation; zero on identical images")
def test_lab_emd_monotone():
    t0 = time.perf_counter()
    red = np.zeros((32, 32, 3))
    red[..., 0] = 1.0
    d = [lab_emd(red, hue_rotated(red, deg)) for deg in (10, 20, 30)]
    print("LabEMD at 10/20/30 degrees:", d)
    assert d[0] < d[1] < d[2]
    assert lab_emd(red, red) == 0.0
    x = np.random.default_rng(0).random((32, 32, 3))
    assert lab_emd(x, x) == 0.0
    assert time.perf_counter() - t0 < 30.0


# --------------------------------------------------------------------------
# 7. DeepEMD


def blob(cx, cy=0.5, size=64, sigma=0.05):
    yy, xx = np.mgrid[0:size, 0:size]
    g = np.exp(-(((xx + 0.5) / size - cx) ** 2 + ((yy + 0.5) / size - cy) ** 2) / (2 * sigma ** 2))
    return np.repeat(g[..., None], 3, axis=2)


@criterion(7, "DeepEMD of a translated blob equals the shift")
def test_deep_emd_translation():
    t0 = time.perf_counter()
    for delta in (0.1, 0.2, 0.3):
        cost = deep_emd(blob(0.3), blob(0.3 + delta), LuminanceDepth())
        print(f"shift {delta}: DeepEMD {cost:.6f}")
        assert abs(cost - delta) <= 0.05 * delta
    assert time.perf_counter() - t0 < 30.0


# --------------------------------------------------------------------------
# 10. preprocessing

FS = 250.0


def recording(x):
    return EEGRecording(np.atleast_2d(x), FS, 50)


@criterion(10, "band-pass, baseline, deterministic pipeline")
def test_preprocessing(tmp_path):
    t0 = time.perf_counter()
    t = np.arange(300) / FS
    for f in (2.5, 10.0, 40.0, 75.0):
        x = np.sin(2 * np.pi * f * t + 0.3)
        assert np.max(np.abs(bandpass(recording(x), 0.1, 100.0).data[0] - x)) < 1e-9
    for f in (110.0, 120.0):
        x = np.sin(2 * np.pi * f * t)
        assert np.max(np.abs(bandpass(recording(x), 0.1, 100.0).data)) < 1e-9
    assert np.max(np.abs(bandpass(recording(np.full(300, 2.0)), 0.1, 100.0).data)) < 1e-9

    rng = np.random.default_rng(0)
    for _ in range(20):
        out = baseline_correct(recording(rng.normal(5.0, 3.0, size=(4, 300))), 200.0)
        assert np.max(np.abs(out.data[:, :50].mean(axis=1))) < 1e-12

    x = rng.normal(size=(6, 300))
    a = preprocess_recording(recording(x), PreprocessConfig())
    b = preprocess_recording(recording(x.copy()), PreprocessConfig())
    assert a.tobytes() == b.tobytes()
    arrays = []
    for name in ("a", "b"):
        m = gen_synthetic(tmp_path / name, seed=1, n_classes=2, n_per_class=2, C=5, T=64, image_size=16)
        arrays.append(load_preprocessed(m, m.split("train")).tobytes())
    assert arrays[0] == arrays[1]
    assert time.perf_counter() - t0 < 10.0


# --------------------------------------------------------------------------
# 8, 9, 11: end-to-end on the 8-item synthetic dataset


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("accept")
    ds = root / "ds"
    assert main(["gen-synth", "--out", str(ds), "--n-classes", "4", "--n-per-class", "2",
                 "--n-layouts", "2", "--n-palettes", "2", "--seed", "0"]) == 0
    conf = root / "config.json"
    conf.write_text(json.dumps({"dataset": str(ds)}), encoding="utf-8")
    t0 = time.perf_counter()
    assert main(["train", "--config", str(conf), "--out", str(root / "run_a")]) == 0
    return {"root": root, "config": conf, "run": root / "run_a", "train_seconds": time.perf_counter() - t0}


@pytest.fixture(scope="session")
def overfit_model(overfit_run):
    model, _ = load_model(overfit_run["run"] / "checkpoint.jmvr")
    cfg = model.cfg
    data = load_split(cfg, DatasetManifest.load(cfg.dataset), "train")
    return model, cfg, data


@pytest.mark.slow
@criterion(8, "overfit 8 items: loss <= 10%, PixCorr > 0.8, SSIM > 0.6")
def test_overfit(overfit_run, overfit_model):
    t0 = time.perf_counter()
    model, cfg, data = overfit_model
    assert len(data.entries) == 8 and cfg.steps == 500
    logs = json.loads((overfit_run["run"] / "train_record.json").read_text())["logs"]
    recons = reconstruct(model, data, cfg, cfg.seed)
    pc = np.mean([pixcorr(resize(r, cfg.metric_size), resize(g, cfg.metric_size))
                  for r, g in zip(recons, data.images)])
    ss = np.mean([ssim(resize(r, cfg.metric_size), resize(g, cfg.metric_size))
                  for r, g in zip(recons, data.images)])
    print(f"loss ratio {logs['loss_ratio']:.4f}  PixCorr {pc:.4f}  SSIM {ss:.4f}")
    assert logs["loss_ratio"] <= 0.10
    assert pc > 0.8 and ss > 0.6
    assert overfit_run["train_seconds"] + time.perf_counter() - t0 < 600.0


@pytest.mark.slow
def test_autoencoder_round_trip(overfit_model):
    model, cfg, data = overfit_model
    with torch.no_grad():
        out = model.decode(model.image_latent(data.views)).numpy()
    pc = np.mean([pixcorr(resize(r, cfg.metric_size), resize(g, cfg.metric_size))
                  for r, g in zip(out, data.images)])
    assert pc > 0.95


@pytest.mark.slow
@criterion(9, "masking EEG raises LabEMD and DeepEMD; masking text raises LabEMD")
def test_masking_direction(overfit_model):
    t0 = time.perf_counter()
    model, cfg, data = overfit_model
    eeg = mask_sweep(model, data, cfg, "eeg", [0.0, 1.0], cfg.seed)
    text = mask_sweep(model, data, cfg, "text", [0.0, 1.0], cfg.seed)
    print("eeg", eeg)
    print("text", text)
    assert eeg[1]["LabEMD"] > eeg[0]["LabEMD"]
    assert eeg[1]["DeepEMD"] > eeg[0]["DeepEMD"]
    assert text[1]["LabEMD"] > text[0]["LabEMD"]
    assert mask_sweep(model, data, cfg, "eeg", [0.0, 1.0], cfg.seed) == eeg
    assert time.perf_counter() - t0 < 300.0


@pytest.mark.slow
@criterion(11, "train and reconstruct are bitwise reproducible")
def test_reproducibility(overfit_run):
    t0 = time.perf_counter()
    root, conf = overfit_run["root"], overfit_run["config"]
    assert main(["train", "--config", str(conf), "--out", str(root / "run_b")]) == 0
    a = (overfit_run["run"] / "checkpoint.jmvr").read_bytes()
    b = (root / "run_b" / "checkpoint.jmvr").read_bytes()
    assert a == b
    for name in ("rec_a", "rec_b"):
        assert main(["reconstruct", "--checkpoint", str(overfit_run["run"] / "checkpoint.jmvr"),
                     "--split", "train", "--out", str(root / name)]) == 0
    pngs = sorted(p.name for p in (root / "rec_a").glob("*.png"))
    assert len(pngs) == 9
    for name in pngs:
        assert (root / "rec_a" / name).read_bytes() == (root / "rec_b" / name).read_bytes()
    assert overfit_run["train_seconds"] + time.perf_counter() - t0 < 720.0
