import numpy as np
import pytest
import torch

import mesen.pipeline as pipeline
from mesen.core import PairedDataset, default_config
from mesen.data import ModalitySpec, SynthSpec, generate_synthetic, sample_few_labels
from mesen.nets import encoder_from_config
from mesen.pipeline import (Checkpoint, TrainingError, UnimodalModel, ablation_intra_negatives, baseline_encoder_seed,
                            finetune, pretrain, train_supervised_baseline)

SPEC = SynthSpec(class_count=3, users=3, samples_per_user_per_class=6,
                 modality_specs=(ModalitySpec("acc", 2, 16, "sin"), ModalitySpec("gyro", 2, 16, "cos_mix")))
SMALL = dict(feature_dim=8, hidden_dim=8, conv_channels=4, attention_heads=2, pretrain_batch=16,
             epochs_pretrain=2, epochs_finetune=3)


@pytest.fixture(scope="module")
def data():
    return generate_synthetic(SPEC, 0)


@pytest.fixture(scope="module")
def cfg():
    return default_config(3, **SMALL)


@pytest.fixture(scope="module")
def ckpt(data, cfg):
    return pretrain(data, cfg, seed=1)


def _params(model):
    return [p.detach().clone() for p in model.parameters()]


def _same(a, b):
    return len(a) == len(b) and all(torch.equal(x, y) for x, y in zip(a, b))


def test_checkpoint_structure(ckpt, data):
    assert sorted(ckpt.encoders) == sorted(ckpt.projectors) == ["acc", "gyro"]
    assert ckpt.head.spec["class_count"] == 3
    # 54 samples, batch 16: 4 batches per epoch (the last has 6 >= 2 samples)
    assert ckpt.history_array().shape == (8, 7)
    assert ckpt.features(data, "acc").shape == (len(data), 8)


def test_pretrain_deterministic(data, cfg, ckpt):
    again = pretrain(data, cfg, seed=1)
    assert np.array_equal(again.history_array(), ckpt.history_array())
    other = pretrain(data, cfg, seed=2)
    assert not np.array_equal(other.history_array(), ckpt.history_array())


def test_pretrain_never_reads_labels(data, cfg, ckpt):
    blind = pretrain(data.without_labels(), cfg, seed=1)
    assert np.array_equal(blind.history_array(), ckpt.history_array())
    for m in data.modalities:
        assert _same(_params(blind.encoders[m]), _params(ckpt.encoders[m]))
        assert _same(_params(blind.projectors[m]), _params(ckpt.projectors[m]))
    assert _same(_params(blind.head), _params(ckpt.head))


def test_pretrain_drops_singleton_batch(data, cfg):
    # 54 = 53 + 1: the trailing single-sample batch is skipped
    ck = pretrain(data, cfg.replace(pretrain_batch=53, epochs_pretrain=1), seed=0)
    assert len(ck.history) == 1


def test_pretrain_errors(data, cfg):
    with pytest.raises(TrainingError, match="exceeds"):
        pretrain(data, cfg.replace(pretrain_batch=len(data) + 1))
    with pytest.raises(TrainingError, match="two modalities"):
        pretrain(PairedDataset(("acc",), {"acc": data.windows["acc"]}, 3), cfg)


def test_pretrain_aborts_on_nonfinite(data, cfg, monkeypatch):
    real = pipeline.pretrain_loss_multi

    def poisoned(z, y, config, objective):
        out = real(z, y, config, objective)
        out.l_pt = float("nan")
        return out

    monkeypatch.setattr(pipeline, "pretrain_loss_multi", poisoned)
    with pytest.raises(TrainingError, match="step 0"):
        pretrain(data, cfg)


def test_checkpoint_roundtrip(tmp_path, ckpt, data):
    ckpt.save(tmp_path / "c.npz")
    back = Checkpoint.load(tmp_path / "c.npz")
    assert back.objective == "mesen" and back.config == ckpt.config
    assert np.array_equal(back.history_array(), ckpt.history_array())
    assert np.array_equal(back.features(data, "gyro"), ckpt.features(data, "gyro"))
    ckpt.write_history_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "step,epoch,l_cmf,l_mpc,l_pr,delta,l_pt" and len(lines) == 9


def test_intra_ablation_differs(data, cfg, ckpt):
    ab = ablation_intra_negatives(data, cfg, seed=1)
    assert ab.objective == "intra_negatives"
    assert ab.history[0][2] != ckpt.history[0][2]


def test_finetune_batches_match_selection(data, cfg, ckpt, monkeypatch):
    sizes = []
    real = pipeline.finetune_loss

    def spy(log_probs, labels, *a, **k):
        sizes.append(log_probs.shape[0])
        return real(log_probs, labels, *a, **k)

    monkeypatch.setattr(pipeline, "finetune_loss", spy)
    finetune(ckpt, "acc", data, sample_few_labels(data, 1, 0), cfg)
    assert sizes == [3] * cfg.epochs_finetune
    sizes.clear()
    finetune(ckpt, "acc", data, sample_few_labels(data, 5, 0), cfg.replace(finetune_batch=4))
    # 15 labels in batches of 4: the short last batch is kept
    assert sizes == [4, 4, 4, 3] * cfg.epochs_finetune


def test_finetune_deterministic_and_structural(data, cfg, ckpt):
    sel = sample_few_labels(data, 2, 3)
    a, b = finetune(ckpt, "gyro", data, sel, cfg, seed=4), finetune(ckpt, "gyro", data, sel, cfg, seed=4)
    assert _same(_params(a), _params(b))
    assert a.encoder.layer_ids == ckpt.encoders["gyro"].layer_ids
    # the checkpoint itself is untouched
    assert not _same(_params(a.encoder), _params(ckpt.encoders["gyro"]))


def test_zero_lambda_ignores_gamma(data, cfg, ckpt):
    sel = sample_few_labels(data, 1, 0)
    a = finetune(ckpt, "acc", data, sel, cfg.replace(lambda_fr=0.0, gamma=(9.0, 0.0, 3.0)), seed=0)
    b = finetune(ckpt, "acc", data, sel, cfg.replace(lambda_fr=0.0), seed=0)
    assert _same(_params(a), _params(b))


def test_finetune_errors(data, cfg, ckpt):
    sel = sample_few_labels(data, 1, 0)
    with pytest.raises(TrainingError, match="not in checkpoint"):
        finetune(ckpt, "radar", data, sel, cfg)
    empty = sel.__class__({}, 0.0, 1)
    with pytest.raises(TrainingError, match="empty"):
        finetune(ckpt, "acc", data, empty, cfg)
    with pytest.raises(TrainingError, match="empty"):
        train_supervised_baseline("acc", data, empty, cfg)


def test_baseline_differs_only_in_encoder_init(data, cfg):
    sel = sample_few_labels(data, 1, 0)
    plain = cfg.replace(lambda_fr=0.0)
    base = train_supervised_baseline("acc", data, sel, plain, seed=7)
    c, t = data.shape_of("acc")
    enc = encoder_from_config(c, t, plain, baseline_encoder_seed(7))
    fake = Checkpoint({"acc": enc}, {}, None, plain)
    tuned = finetune(fake, "acc", data, sel, plain, seed=7)
    assert _same(_params(base), _params(tuned))


def test_baseline_zero_epochs_is_random_init(data, cfg):
    sel = sample_few_labels(data, 1, 0)
    model = train_supervised_baseline("gyro", data, sel, cfg.replace(epochs_finetune=0), seed=3)
    c, t = data.shape_of("gyro")
    assert _same(_params(model.encoder), _params(encoder_from_config(c, t, cfg, baseline_encoder_seed(3))))


def test_regularizer_keeps_early_layers_near_checkpoint(data, cfg, ckpt):
    sel = sample_few_labels(data, 3, 0)
    run = cfg.replace(epochs_finetune=20, learning_rate=1e-2, reg_target="checkpoint")

    def drift(model):
        start = dict(ckpt.encoders["acc"].layers())["conv1"]
        now = dict(model.encoder.layers())["conv1"]
        return sum(float((a - b).detach().pow(2).sum()) for a, b in zip(now, start))

    free = finetune(ckpt, "acc", data, sel, run.replace(lambda_fr=0.0), seed=0)
    held = finetune(ckpt, "acc", data, sel, run.replace(lambda_fr=1.0, gamma=(100.0, 1.0, 0.0)), seed=0)
    assert drift(held) < drift(free)


def test_unimodal_roundtrip(tmp_path, data, cfg, ckpt):
    model = finetune(ckpt, "acc", data, sample_few_labels(data, 1, 0), cfg)
    model.save(tmp_path / "m.npz")
    back = UnimodalModel.load(tmp_path / "m.npz")
    x = data.array("acc")
    assert back.modality_id == "acc" and back.class_count == 3
    assert np.array_equal(back.predict_proba(x), model.predict_proba(x))
    with pytest.raises(ValueError, match="not a fine-tuned"):
        UnimodalModel.load(ckpt.save(tmp_path / "c.npz"))
    with pytest.raises(ValueError, match="not a pretraining"):
        Checkpoint.load(tmp_path / "m.npz")


def test_three_modalities(cfg):
    spec = SynthSpec(class_count=3, users=2, samples_per_user_per_class=4, modality_specs=(
        ModalitySpec("a", 2, 16, "sin"), ModalitySpec("b", 1, 16, "cos_mix"), ModalitySpec("c", 3, 16, "sin")))
    ck = pretrain(generate_synthetic(spec, 0), cfg.replace(pretrain_batch=8, epochs_pretrain=1))
    assert ck.modalities == ["a", "b", "c"]


def _progress_runs(noise, correlation):
    spec = SynthSpec(class_count=4, users=4, samples_per_user_per_class=8, noise_sigma=noise,
                     correlation_strength=correlation,
                     modality_specs=(ModalitySpec("acc", 2, 32, "sin"), ModalitySpec("gyro", 2, 32, "cos_mix")))
    ds = generate_synthetic(spec, 0)
    cfg = default_config(4, 16, hidden_dim=16, conv_channels=8, attention_heads=2, pretrain_batch=32,
                         epochs_pretrain=12)
    return [pretrain(ds, cfg, seed=s) for s in range(5)]


def test_cmf_decreases_over_training():
    runs = _progress_runs(0.1, 1.0)
    wins = sum(ck.epoch_means("l_cmf")[-1] < ck.epoch_means("l_cmf")[0] for ck in runs)
    assert wins >= 3


def test_smoothed_history_nonincreasing_on_clean_data():
    runs = _progress_runs(0.0, 1.0)
    # three-epoch moving average of the per-epoch mean total loss
    smooth = [np.convolve(ck.epoch_means("l_pt"), np.ones(3) / 3, "valid") for ck in runs]
    assert sum(bool(np.all(np.diff(s) <= 0)) for s in smooth) >= 3
