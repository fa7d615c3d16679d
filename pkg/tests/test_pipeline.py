import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from diffinject.bias_bench import DatasetSpec, generate_dataset, save_dataset
from diffinject.classifiers import rank_losses
from diffinject.config import config_from_dict
from diffinject.diffusion import default_schedule
from diffinject.errors import ConfigError, PairingError, StageError
from diffinject.injector import InjectionConfig
from diffinject.pipeline import (
    PROVENANCE_FIELDS, STAGES, Pipeline, build_syn_dataset, foreground_mask, load_mask_file, pair_samples,
    read_provenance, run_experiment, synthesize, write_provenance,
)
from diffinject.seeding import stream


@pytest.fixture(scope="module")
def toy_train():
    train, _ = generate_dataset(DatasetSpec(num_classes=3, samples_per_class=1000, conflict_ratio=0.01,
                                            test_samples_per_class=0, image_size=16, seed=0))
    return train


def topk_of(train, k=10):
    conflicts = train.sample_ids[train.is_conflict][:k]
    return rank_losses(conflicts, np.arange(len(conflicts), 0, -1, dtype=float), len(conflicts))


# --- pairing --------------------------------------------------------------

@settings(max_examples=20, deadline=None)
@given(n=st.integers(0, 60), k=st.integers(1, 10), seed=st.integers(0, 99), same=st.booleans())
def test_pairing_properties(toy_train, n, k, seed, same):
    topk = [int(s) for s in toy_train.sample_ids[toy_train.is_conflict][:k]]
    pairs = pair_samples(topk, toy_train, n, stream(seed, "p"), same)
    assert len(pairs) == n
    labels = dict(zip(toy_train.sample_ids.tolist(), toy_train.class_labels.tolist()))
    for content, original in pairs:
        assert content in topk and original not in topk
        if same:
            assert labels[content] == labels[original]
    assert pairs == pair_samples(topk, toy_train, n, stream(seed, "p"), same)


def test_pairing_errors(toy_train):
    with pytest.raises(PairingError):
        pair_samples([], toy_train, 3, stream(0, "p"))
    tiny = toy_train.subset([0])
    with pytest.raises(PairingError):
        pair_samples([int(tiny.sample_ids[0])], tiny, 1, stream(0, "p"))


# --- synthetic set --------------------------------------------------------

def test_syn_set_size_labels_and_provenance(toy_train, zero_denoiser, tmp_path):
    topk = topk_of(toy_train)
    cfg = InjectionConfig(0.9, t_edit=50, num_steps=10)
    d_syn, prov = build_syn_dataset(topk, toy_train, zero_denoiser, default_schedule(100), cfg, 0.1, seed=3,
                                    batch_size=128)
    assert len(d_syn) == 300 and len(prov) == 300
    assert d_syn.sample_ids.min() > toy_train.sample_ids.max()
    assert not d_syn.has_bias_labels
    for i, p in enumerate(prov):
        assert p["sample_id"] == d_syn.sample_ids[i]
        assert p["content_id"] in topk.sample_ids
        assert p["assigned_label"] == d_syn.class_labels[i]
        assert p["assigned_label"] == toy_train.class_labels[toy_train.index_of([p["content_id"]])[0]]
        assert (p["t_edit"], p["t_boost"], p["gamma"]) == (50, 20, 0.9)
    write_provenance(tmp_path / "p.csv", prov)
    assert read_provenance(tmp_path / "p.csv") == prov
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == ",".join(PROVENANCE_FIELDS)


def test_zero_ratio_gives_empty_syn_set(toy_train, zero_denoiser):
    d_syn, prov = build_syn_dataset(topk_of(toy_train), toy_train, zero_denoiser, default_schedule(100),
                                    InjectionConfig(num_steps=5), 0.0)
    assert len(d_syn) == 0 and prov == []


def test_synthesis_does_not_depend_on_workers(toy_train, zero_denoiser):
    topk = topk_of(toy_train)
    pairs = pair_samples(topk.sample_ids, toy_train, 20, stream(0, "p"))
    cfg = InjectionConfig(0.9, t_edit=60, num_steps=10)
    one = synthesize(zero_denoiser, default_schedule(100), toy_train, pairs, cfg, batch_size=6, workers=1)
    many = synthesize(zero_denoiser, default_schedule(100), toy_train, pairs, cfg, batch_size=6, workers=3)
    assert np.array_equal(one, many)


def test_foreground_mask_finds_glyph():
    img = np.zeros((1, 32, 32, 3))
    img[0, 8:16, 8:16, 0] = 1.0
    mask = foreground_mask(img, 8)
    assert mask.shape == (1, 8, 8)
    assert mask[0, 2:4, 2:4].all()
    assert mask.sum() == 4


def test_load_mask_file(tmp_path):
    arr = np.zeros((8, 8), np.uint8)
    arr[2:5, 2:5] = 1
    np.save(tmp_path / "m.npy", arr)
    assert load_mask_file(tmp_path / "m.npy", 8).sum() == 9
    with pytest.raises(ConfigError):
        load_mask_file(tmp_path / "m.npy", 4)


# --- orchestration on a miniature configuration ---------------------------

MINI = {
    "seed": 1,
    "data": {"num_classes": 3, "image_size": 16, "samples_per_class": 40, "conflict_ratio": 0.1,
             "test_samples_per_class": 9},
    "bias_classifier": {"epochs": 2},
    "classifier": {"epochs": 2},
    "diffusion": {"T": 50, "steps": 2, "batch_size": 8, "base_width": 8, "pretrain_per_class": 6},
    "injection": {"num_steps": 5, "t_edit": 30, "calibration_images": 4},
    "pipeline": {"K": 4},
}


def mini(**overrides):
    data = json.loads(json.dumps(MINI))
    for section, values in overrides.items():
        if isinstance(values, dict):
            data.setdefault(section, {}).update(values)
        else:
            data[section] = values
    return config_from_dict(data)


def test_full_mini_run_writes_metrics_and_reuses_stages(tmp_path):
    store = tmp_path / "store"
    record = run_experiment(mini(), tmp_path / "a", store)
    assert set(record["stages"]) == set(STAGES)
    m = json.loads((tmp_path / "a" / "metrics.json").read_text())
    assert m["syn_count"] == 12  # round(0.1 * 120)
    assert len(m["topk"]) == 4
    again = run_experiment(mini(), tmp_path / "b", store)
    assert all(s["skipped"] for s in again["stages"].values())
    # a changed classifier setting reruns only the classifier stages
    changed = run_experiment(mini(classifier={"epochs": 3}), tmp_path / "c", store)
    skipped = {s for s, v in changed["stages"].items() if v["skipped"]}
    assert skipped == {"gen-data", "train-bias", "extract-topk", "train-diffusion", "inject"}


def test_calibrated_t_edit_is_recorded(tmp_path):
    cfg = mini(injection={"t_edit": None, "calibration_threshold": 0.0})
    pipe = Pipeline(cfg, tmp_path, tmp_path / "store")
    pipe.run_stage("inject")
    cal = json.loads((pipe.dir("inject") / "calibration.json").read_text())
    assert cal["t_edit"] == cal["curve"]["timesteps"][0]


def test_failing_stage_is_wrapped_and_not_marked_done(tmp_path):
    cfg = mini(injection={"t_edit": None, "calibration_threshold": 1e9})
    pipe = Pipeline(cfg, tmp_path, tmp_path / "store")
    with pytest.raises(StageError, match=r"^inject: \[calibration\]"):
        pipe.run_stage("inject")
    assert not pipe.done("inject")
    assert pipe.done("train-diffusion")


def test_missing_upstream_without_auto_run(tmp_path):
    pipe = Pipeline(mini(), tmp_path, tmp_path / "store")
    with pytest.raises(StageError, match="gen-data"):
        pipe.run_stage("train-bias", upstream=False)
    with pytest.raises(ConfigError):
        pipe.run_stage("bogus")


def test_ingested_folder_runs_through_gen_data(tmp_path):
    train, test = generate_dataset(DatasetSpec(num_classes=2, samples_per_class=5, image_size=16,
                                               conflict_ratio=0.2, test_samples_per_class=4, seed=0))
    save_dataset(train, tmp_path / "tr")
    save_dataset(test, tmp_path / "te")
    cfg = mini(data={"num_classes": 2, "path": str(tmp_path / "tr"), "test_path": str(tmp_path / "te")})
    pipe = Pipeline(cfg, tmp_path, tmp_path / "store")
    pipe.run_stage("gen-data")
    assert len(pipe.train_set()) == 10 and len(pipe.test_set()) == 8
    assert np.array_equal(pipe.train_set().class_labels, train.class_labels)
