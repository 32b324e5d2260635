"""
Normalization x initialization ablation: trains one model per (norm, init)
pair on identical data and reports the final top-1 of each. A diverging
pair is reported as NA and the sweep moves on.
"""

import logging
import os
import time
from dataclasses import replace

import numpy as np
import pandas as pd

from errors import NonConvergenceError
from models import build_model
from trainer import STATUS_NA, STATUS_OK, Trainer

logger = logging.getLogger(__name__)

SWEEP_GRID = [
    ('cgbn', 'bcw'),
    ('cgbn', 'xavier'),
    ('cgbn', 'rayleigh'),
    ('cbn', 'bcw'),
    ('bn', 'bcw'),
    ('cbn', 'rayleigh'),
]


def _suffixed(path, tag):
    if not path:
        return path
    root, ext = os.path.splitext(path)
    return f"{root}_{tag}{ext}"


def run_pair(run_config, train_set, test_set, norm, init):
    """Final MetricsRecord fields for one pair, or status NA when training diverges"""
    spec = replace(run_config.model, norm=norm, init=init)
    tag = f"{norm}_{init}"
    train_config = replace(run_config.train,
                           metrics_file=_suffixed(run_config.train.metrics_file, tag),
                           checkpoint=_suffixed(run_config.train.checkpoint, tag))
    trainer = Trainer(build_model(spec), train_set, test_set, train_config, run_config.data.augment)
    try:
        records = trainer.fit()
    except NonConvergenceError as e:
        logger.warning(f"⚠️ {tag} diverged: {e}")
        return {'norm': norm, 'init': init, 'top1': np.nan, 'test_loss': np.nan, 'status': STATUS_NA}
    last = records[-1] if records else None
    return {
        'norm': norm,
        'init': init,
        'top1': last.top1 if last else np.nan,
        'test_loss': last.test_loss if last else np.nan,
        'status': STATUS_OK,
    }


def run_sweep(run_config, train_set, test_set, grid=None):
    grid = grid or SWEEP_GRID
    logger.info(f"🚀 sweep over {len(grid)} norm/init pairs, {run_config.train.epochs} epochs each")
    start = time.time()
    rows = []
    for norm, init in grid:
        logger.info(f"📊 training {norm}/{init}...")
        rows.append(run_pair(run_config, train_set, test_set, norm, init))
    table = pd.DataFrame(rows, columns=['norm', 'init', 'top1', 'test_loss', 'status'])
    logger.info(f"🏁 sweep finished in {time.time() - start:.1f} seconds")
    return table


def format_sweep(table):
    shown = table.copy()
    shown['top1'] = [f"{v:.2f}" if s == STATUS_OK and np.isfinite(v) else STATUS_NA
                     for v, s in zip(table['top1'], table['status'])]
    return shown.to_string(index=False)
