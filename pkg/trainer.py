"""
Training and evaluation loops, metrics stream and training checkpoints.
"""

import json
import logging
import os
import queue
import threading
import time
from contextlib import closing
from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np
import pandas as pd

from bitpack import set_kernel_threads
from datasets import iter_batches
from errors import DataError, DomainError, NonConvergenceError
from models import ModelSpec, build_model
from optim import AdamState, TrainConfig, adam_step, lr_at

logger = logging.getLogger(__name__)

STATUS_OK = 'ok'
STATUS_NA = 'NA'
EVAL_BATCH = 500


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits"""
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = len(labels)
    loss = -log_probs[np.arange(n), labels].mean()
    grad = np.exp(log_probs)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), (grad / n).astype(logits.dtype)


def topk_correct(logits, labels, k):
    """Count of samples whose label ranks in the top k; equal logits rank the lower class index first"""
    order = np.argsort(-logits, axis=1, kind='stable')[:, :k]
    return int((order == labels[:, None]).any(axis=1).sum())


def score_logits(logits, labels):
    k = min(5, logits.shape[1])
    loss, _ = softmax_cross_entropy(logits, labels)
    n = len(labels)
    return {
        'top1': 100.0 * topk_correct(logits, labels, 1) / n,
        'top5': 100.0 * topk_correct(logits, labels, k) / n,
        'loss': loss,
    }


def predict(model, images, batch_size=EVAL_BATCH):
    model.eval()
    outputs = [model.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(outputs)


def evaluate(model, dataset, batch_size=EVAL_BATCH):
    """top1/top5 in percent and mean cross-entropy, with running normalization statistics"""
    if len(dataset) == 0:
        raise DataError(f"cannot evaluate on an empty {dataset.split} split")
    was_training = model.training
    logits = predict(model, dataset.images, batch_size)
    model.train(was_training)
    return score_logits(logits, dataset.labels)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    test_loss: float
    top1: float
    lr: float
    wall_time: float
    top5: Optional[float] = None
    status: str = STATUS_OK

    def to_json(self):
        d = asdict(self)
        if d['top5'] is None:
            del d['top5']
        return json.dumps(d, sort_keys=True, allow_nan=True)


class MetricsWriter:
    """Append-only JSON-lines metrics file"""

    def __init__(self, path):
        self.path = path
        if path:
            directory = os.path.dirname(path)
            if directory:
                os.makedirs(directory, exist_ok=True)
            open(path, 'w').close()

    def write(self, record):
        if self.path:
            with open(self.path, 'a') as f:
                f.write(record.to_json() + '\n')


def read_metrics(path):
    with open(path) as f:
        return pd.DataFrame([json.loads(line) for line in f if line.strip()])


def metrics_table(records):
    """Console table for a list of MetricsRecord"""
    frame = pd.DataFrame([asdict(r) for r in records])
    if frame.empty:
        return '(no epochs)'
    if frame['top5'].isna().all():
        frame = frame.drop(columns=['top5'])
    return frame.to_string(index=False, float_format=lambda v: f"{v:.4f}")


def save_checkpoint(path, model, adam_state, train_config, epoch, status=STATUS_OK):
    """Latent weights, optimizer moments and running statistics in one .npz"""
    params, buffers = model.state()
    arrays = {f"param/{name}": value for name, value in params.items()}
    arrays.update({f"buffer/{name}": value for name, value in buffers.items()})
    arrays.update({f"adam_m/{name}": value for name, value in adam_state.m.items()})
    arrays.update({f"adam_v/{name}": value for name, value in adam_state.v.items()})
    meta = {
        'spec': model.spec.to_dict(),
        'train': train_config.to_dict(),
        'epoch': epoch,
        'adam_step': adam_state.step,
        'status': status,
    }
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    tmp = path + '.tmp'
    with open(tmp, 'wb') as f:
        np.savez(f, meta=np.array(json.dumps(meta)), **arrays)
    os.replace(tmp, path)
    logger.debug(f"checkpoint written to {path} (epoch {epoch}, status {status})")


def load_checkpoint(path):
    """(model, adam_state, meta) rebuilt from a training checkpoint"""
    if not os.path.exists(path):
        raise DataError(f"checkpoint {path} not found")
    try:
        with np.load(path, allow_pickle=False) as f:
            meta = json.loads(str(f['meta']))
            groups = {'param': {}, 'buffer': {}, 'adam_m': {}, 'adam_v': {}}
            for key in f.files:
                if key == 'meta':
                    continue
                group, name = key.split('/', 1)
                groups[group][name] = f[key]
    except (OSError, ValueError, KeyError) as e:
        raise DataError(f"unreadable checkpoint {path}: {e}") from e
    model = build_model(ModelSpec.from_dict(meta['spec']))
    model.load_state(groups['param'], groups['buffer'])
    adam_state = AdamState(meta['adam_step'], groups['adam_m'], groups['adam_v'])
    return model, adam_state, meta


class _Prefetcher:
    """Produces batches on a worker thread into a bounded queue; close() stops the worker early"""

    _DONE = object()
    _POLL = 0.1

    def __init__(self, batches, depth):
        self.queue = queue.Queue(maxsize=depth)
        self.error = None
        self.stop = threading.Event()
        self.thread = threading.Thread(target=self._run, args=(batches,), name='bcnn-prefetch', daemon=True)
        self.thread.start()

    def _put(self, item):
        while not self.stop.is_set():
            try:
                self.queue.put(item, timeout=self._POLL)
                return True
            except queue.Full:
                continue
        return False

    def _run(self, batches):
        try:
            for batch in batches:
                if not self._put(batch):
                    return
        except Exception as e:
            self.error = e
        finally:
            self._put(self._DONE)

    def __iter__(self):
        while True:
            item = self.queue.get()
            if item is self._DONE:
                break
            yield item
        self.thread.join()
        if self.error is not None:
            raise self.error

    def close(self):
        self.stop.set()
        while True:
            try:
                self.queue.get_nowait()
            except queue.Empty:
                break
        self.thread.join()


class Trainer:
    """
    Runs epochs over a training split: forward, cross-entropy, backward, Adam.
    Data order and augmentation for epoch e come from default_rng([seed, e]),
    so a run is a pure function of the configuration.
    """

    def __init__(self, model, train_set, test_set, config=None, augment=False):
        self.model = model
        self.train_set = train_set
        self.test_set = test_set
        self.config = config or TrainConfig()
        self.augment = augment
        self.adam = AdamState()
        self.records = []
        self.metrics = MetricsWriter(self.config.metrics_file)
        set_kernel_threads(self.config.threads)

    def batches(self, epoch):
        rng = np.random.default_rng([self.config.seed, epoch])
        batches = iter_batches(self.train_set, self.config.batch_size, rng, self.augment)
        if self.config.prefetch > 0:
            return _Prefetcher(batches, self.config.prefetch)
        return batches

    def train_step(self, images, labels, lr):
        self.model.zero_grad()
        try:
            logits = self.model.forward(images)
        except DomainError as e:
            raise NonConvergenceError(f"activations diverged: {e}") from e
        loss, grad = softmax_cross_entropy(logits, labels)
        if not np.isfinite(loss):
            raise NonConvergenceError(f"loss is {loss}")
        self.model.backward(grad)
        adam_step(self.model.parameters(), self.adam, self.config, lr)
        return loss

    def run_epoch(self, epoch):
        lr = lr_at(epoch, self.config)
        self.model.train()
        start = time.perf_counter()
        total, count = 0.0, 0
        with closing(self.batches(epoch)) as batches:
            for images, labels in batches:
                loss = self.train_step(images, labels, lr)
                total += loss * len(labels)
                count += len(labels)
        train_loss = total / max(count, 1)
        scores = evaluate(self.model, self.test_set)
        record = MetricsRecord(
            epoch=epoch,
            train_loss=train_loss,
            test_loss=scores['loss'],
            top1=scores['top1'],
            lr=lr,
            wall_time=time.perf_counter() - start,
            top5=scores['top5'] if self.model.spec.num_classes >= 100 else None,
        )
        return record

    def _abort(self, epoch, error):
        record = MetricsRecord(epoch, float('nan'), float('nan'), float('nan'), lr_at(epoch, self.config), 0.0,
                               status=STATUS_NA)
        self.records.append(record)
        self.metrics.write(record)
        save_checkpoint(self.config.checkpoint, self.model, self.adam, self.config, epoch, STATUS_NA)
        logger.error(f"❌ epoch {epoch}: training diverged ({error}), status {STATUS_NA}")

    def fit(self):
        """Train for config.epochs; returns the metrics records"""
        logger.info(f"🚀 training {self.model.spec.arch} for {self.config.epochs} epochs "
                    f"on {len(self.train_set)} samples")
        save_checkpoint(self.config.checkpoint, self.model, self.adam, self.config, 0)
        for epoch in range(self.config.epochs):
            try:
                record = self.run_epoch(epoch)
            except NonConvergenceError as e:
                self._abort(epoch, e)
                raise
            self.records.append(record)
            self.metrics.write(record)
            save_checkpoint(self.config.checkpoint, self.model, self.adam, self.config, epoch + 1)
            logger.info(f"📊 epoch {epoch}: train loss {record.train_loss:.4f}, test loss {record.test_loss:.4f}, "
                        f"top1 {record.top1:.2f}%, lr {record.lr:g}, {record.wall_time:.1f}s")
        if self.records:
            logger.info("\n" + metrics_table(self.records))
        return self.records


def train(model, train_set, test_set, config=None, augment=False):
    return Trainer(model, train_set, test_set, config, augment).fit()
