#!/usr/bin/env python3
"""
Tests for the training loop, evaluation, metrics stream and checkpoints.
"""
import json
import os
import threading

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from conftest import MNIST_DIR, numeric_grad
from datasets import DataConfig, Dataset, load_dataset, make_synthetic
from errors import DataError, NonConvergenceError
from models import ModelSpec, build_model
from optim import TrainConfig
import trainer
from trainer import (MetricsRecord, Trainer, evaluate, load_checkpoint, metrics_table, predict, read_metrics,
                     score_logits, softmax_cross_entropy, topk_correct, train)

SPEC = ModelSpec(arch='small', base_channels=(16, 16), in_channels=1, num_classes=10)


def run_config(tmp_path, tag='run', **fields):
    settings = dict(epochs=2, batch_size=50, metrics_file=str(tmp_path / tag / 'metrics.jsonl'),
                    checkpoint=str(tmp_path / tag / 'checkpoint.npz'))
    settings.update(fields)
    return TrainConfig(**settings)


def without_wall_time(records):
    return [{k: v for k, v in vars(r).items() if k != 'wall_time'} for r in records]


def test_cross_entropy_gradient(rng):
    logits = rng.normal(size=(5, 4))
    labels = np.array([0, 3, 1, 1, 2])
    loss, grad = softmax_cross_entropy(logits, labels)
    assert loss > 0
    numeric = numeric_grad(lambda: softmax_cross_entropy(logits, labels)[0], logits)
    assert np.abs(grad - numeric).max() < 1e-7


def test_perfect_and_uniform_logits():
    labels = np.arange(100) % 10
    perfect = np.eye(10)[labels] * 10.0
    assert score_logits(perfect, labels)['top1'] == 100.0
    uniform = np.zeros((100, 10))
    scores = score_logits(uniform, labels)
    # ties rank the lowest class index first
    assert scores['top1'] == pytest.approx(10.0)
    assert scores['top5'] == pytest.approx(50.0)
    assert scores['loss'] == pytest.approx(np.log(10))


def test_topk_uses_min_of_five_and_classes():
    logits = np.array([[0.1, 0.9, 0.0]])
    assert topk_correct(logits, np.array([2]), 1) == 0
    assert score_logits(logits, np.array([2]))['top5'] == 100.0


def test_evaluate_is_repeatable(synthetic_splits):
    _, test = synthetic_splits
    model = build_model(SPEC)
    first = evaluate(model, test)
    second = evaluate(model, test)
    assert first == second
    assert model.training


def test_evaluate_rejects_empty_split(synthetic_splits):
    _, test = synthetic_splits
    with pytest.raises(DataError):
        evaluate(build_model(SPEC), Dataset(test.images[:0], test.labels[:0], 'test', 10))


def test_zero_epoch_checkpoint_is_initial_state(tmp_path, synthetic_splits):
    train_set, test_set = synthetic_splits
    model = build_model(SPEC)
    params, _ = model.state()
    config = run_config(tmp_path, epochs=0)
    assert Trainer(model, train_set, test_set, config).fit() == []
    restored, adam, meta = load_checkpoint(config.checkpoint)
    assert meta['epoch'] == 0 and meta['status'] == 'ok'
    assert adam.step == 0
    for name, value in restored.state()[0].items():
        assert_array_equal(value, params[name])


def test_training_is_deterministic(tmp_path, synthetic_splits):
    train_set, test_set = synthetic_splits
    first = train(build_model(SPEC), train_set, test_set, run_config(tmp_path, 'a'))
    second = train(build_model(SPEC), train_set, test_set, run_config(tmp_path, 'b'))
    assert without_wall_time(first) == without_wall_time(second)
    a, _, _ = load_checkpoint(str(tmp_path / 'a' / 'checkpoint.npz'))
    b, _, _ = load_checkpoint(str(tmp_path / 'b' / 'checkpoint.npz'))
    for (name, x), (_, y) in zip(a.state()[0].items(), b.state()[0].items()):
        assert_array_equal(x, y, err_msg=name)


def test_prefetch_matches_inline_batches(tmp_path, synthetic_splits):
    train_set, test_set = synthetic_splits
    inline = train(build_model(SPEC), train_set, test_set, run_config(tmp_path, 'inline', epochs=1))
    prefetched = train(build_model(SPEC), train_set, test_set, run_config(tmp_path, 'pre', epochs=1, prefetch=2))
    assert without_wall_time(inline) == without_wall_time(prefetched)


def test_checkpoint_restores_trained_model(tmp_path, synthetic_splits):
    train_set, test_set = synthetic_splits
    model = build_model(SPEC)
    config = run_config(tmp_path, epochs=1)
    train(model, train_set, test_set, config)
    restored, adam, meta = load_checkpoint(config.checkpoint)
    assert meta['epoch'] == 1
    assert meta['train']['batch_size'] == 50
    assert adam.step == 4
    assert set(adam.m) == {p.name for p in model.parameters()}
    assert_array_equal(predict(restored, test_set.images), predict(model, test_set.images))


def test_metrics_stream(tmp_path, synthetic_splits):
    train_set, test_set = synthetic_splits
    config = run_config(tmp_path)
    records = train(build_model(SPEC), train_set, test_set, config)
    frame = read_metrics(config.metrics_file)
    assert frame['epoch'].tolist() == [0, 1]
    assert 'top5' not in frame.columns
    assert (frame['status'] == 'ok').all()
    assert frame['lr'].tolist() == [0.005, 0.005]
    assert 'top5' not in metrics_table(records)


def test_record_json_includes_top5_when_set():
    record = MetricsRecord(3, 1.0, 2.0, 40.0, 0.001, 1.5, top5=70.0)
    assert json.loads(record.to_json())['top5'] == 70.0
    assert 'top5' not in json.loads(MetricsRecord(3, 1.0, 2.0, 40.0, 0.001, 1.5).to_json())


def test_divergence_marks_run_not_available(tmp_path, synthetic_splits):
    train_set, test_set = synthetic_splits
    model = build_model(SPEC)
    head = [p for p in model.parameters() if p.name == 'head.bias'][0]
    head.value[0] = np.nan
    config = run_config(tmp_path)
    with pytest.raises(NonConvergenceError):
        train(model, train_set, test_set, config)
    frame = read_metrics(config.metrics_file)
    assert frame['status'].tolist() == ['NA']
    assert np.isnan(frame['top1'].iloc[0])
    _, _, meta = load_checkpoint(config.checkpoint)
    assert meta['status'] == 'NA'


def test_loss_decreases_on_synthetic(tmp_path, synthetic_splits):
    train_set, test_set = synthetic_splits
    records = train(build_model(SPEC), train_set, test_set, run_config(tmp_path, epochs=4, batch_size=20))
    assert records[-1].train_loss < records[0].train_loss
    assert all(np.isfinite(r.test_loss) for r in records)


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DataError):
        load_checkpoint(str(tmp_path / 'nope.npz'))


@pytest.mark.slow
@pytest.mark.skipif(not os.path.isdir(MNIST_DIR), reason='MNIST files not present')
def test_small_bcnn_reaches_95_on_mnist(tmp_path):
    spec = ModelSpec(arch='small', base_channels=(32, 64), in_channels=1, num_classes=10)
    train_set, test_set = load_dataset(DataConfig(dataset='mnist', path=MNIST_DIR), spec)
    records = train(build_model(spec), train_set, test_set, run_config(tmp_path, epochs=5, batch_size=100))
    assert records[-1].top1 >= 95.0


def test_lone_trailing_sample_joins_last_batch(tmp_path, synthetic_splits):
    _, test_set = synthetic_splits
    train_set = make_synthetic(101, size=12)
    records = train(build_model(SPEC), train_set, test_set, run_config(tmp_path, epochs=1))
    assert records[0].status == 'ok'
    _, adam, _ = load_checkpoint(str(tmp_path / 'run' / 'checkpoint.npz'))
    # batches of 50 and 51
    assert adam.step == 2


def test_prefetcher_stops_when_consumer_leaves():
    def endless():
        while True:
            yield np.zeros(3)

    prefetcher = trainer._Prefetcher(endless(), depth=1)
    next(iter(prefetcher))
    prefetcher.close()
    assert not prefetcher.thread.is_alive()


def test_divergence_with_prefetch_releases_worker(tmp_path, synthetic_splits):
    train_set, test_set = synthetic_splits
    model = build_model(SPEC)
    head = [p for p in model.parameters() if p.name == 'head.bias'][0]
    head.value[0] = np.nan
    with pytest.raises(NonConvergenceError):
        train(model, train_set, test_set, run_config(tmp_path, prefetch=1))
    workers = [t for t in threading.enumerate() if t.name.startswith('bcnn-prefetch')]
    assert workers == []
