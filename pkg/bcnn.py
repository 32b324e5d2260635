#!/usr/bin/env python3
"""
BCNN command line: train, evaluate, export, inspect, benchmark and sweep.

    python bcnn.py train --config configs/mnist_small.cfg
    python bcnn.py eval --config configs/mnist_small.cfg --weights model.bcnx
    python bcnn.py export --checkpoint checkpoint.npz --out model.bcnx
    python bcnn.py inspect model.bcnx
    python bcnn.py bench --sizes 512 1024 4096
    python bcnn.py sweep --config configs/mnist_small.cfg

Exit codes: 0 success, 1 config error, 2 data or file-format error (argparse usage errors also exit 2),
3 training diverged (NaN).
"""
import argparse
import json
import logging
import os
import sys
import time

from config import LOG_CONFIG

logger = logging.getLogger('bcnn')


def setup_logging(log_file=None):
    """Console logging on stdout, plus a log file when configured"""
    level_name = os.environ.get(LOG_CONFIG['env_var'], LOG_CONFIG['log_level']).upper()
    level = getattr(logging, level_name, None)
    if not isinstance(level, int):
        level = logging.INFO
    handlers = [logging.StreamHandler(sys.stdout)]
    log_file = log_file or LOG_CONFIG['log_file']
    if log_file:
        handlers.append(logging.FileHandler(log_file))
    logging.basicConfig(
        level=level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=handlers,
        force=True,
    )
    return logger


def _load_weights(path):
    """A packed .bcnx file or a training checkpoint, told apart by the magic bytes"""
    from serialization import MAGIC, load_packed_model
    from trainer import load_checkpoint

    with open(path, 'rb') as f:
        head = f.read(len(MAGIC))
    if head == MAGIC:
        return load_packed_model(path)
    model, _, _ = load_checkpoint(path)
    return model.eval()


def cmd_train(args):
    from config_file import load_config
    from datasets import load_dataset
    from models import build_model, count_params
    from trainer import Trainer

    run_config = load_config(args.config)
    train_set, test_set = load_dataset(run_config.data, run_config.model)
    model = build_model(run_config.model)
    census = count_params(model)
    logger.info(f"🧮 {run_config.model.arch}: {census.total_params} latent parameters, "
                f"{census.total_equivalent_mb:.4f} MB deployed")
    Trainer(model, train_set, test_set, run_config.train, run_config.data.augment).fit()
    logger.info(f"💾 checkpoint: {run_config.train.checkpoint}, metrics: {run_config.train.metrics_file}")
    return 0


def cmd_eval(args):
    from config_file import load_config
    from datasets import load_dataset
    from errors import ConfigError
    from trainer import evaluate

    run_config = load_config(args.config)
    model = _load_weights(args.weights)
    if model.spec != run_config.model:
        raise ConfigError(f"{args.weights} was built from a different [model] section than {args.config}")
    _, test_set = load_dataset(run_config.data, run_config.model)
    scores = evaluate(model, test_set)
    print(json.dumps(scores, sort_keys=True))
    logger.info(f"✅ top1 {scores['top1']:.2f}%, top5 {scores['top5']:.2f}%, loss {scores['loss']:.4f}")
    return 0


def cmd_export(args):
    from serialization import write_packed_model
    from trainer import load_checkpoint

    model, _, meta = load_checkpoint(args.checkpoint)
    size = write_packed_model(model, args.out)
    logger.info(f"📦 {args.checkpoint} (epoch {meta['epoch']}) -> {args.out}, {size} bytes")
    return 0


def cmd_inspect(args):
    from serialization import inspect_packed

    report = inspect_packed(args.file)
    spec = report['header']['spec']
    print(f"📄 {args.file}")
    print(f"🏗️ spec: {json.dumps(spec, sort_keys=True)}")
    print(f"🧱 layers: {len(report['header']['layers'])}")
    print("🧮 census:")
    for key, value in report['census'].items():
        print(f"   {key}: {value}")
    bits = report['bits']
    if bits.empty:
        print("📊 no binary tensors")
    else:
        print("📊 +1 bit fraction per plane:")
        print(bits.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return 0


def cmd_bench(args):
    from bench import run_bench

    table = run_bench(args.sizes, args.rows, args.cols, args.repeats)
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4g}"))
    return 0


def cmd_sweep(args):
    from config_file import load_config
    from datasets import load_dataset
    from sweep import format_sweep, run_sweep

    run_config = load_config(args.config)
    train_set, test_set = load_dataset(run_config.data, run_config.model)
    print(format_sweep(run_sweep(run_config, train_set, test_set)))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog='bcnn', description='Binary complex neural networks')
    parser.add_argument('--log-file', default=None, help='also write logs to this file')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('train', help='train a model from a config file')
    p.add_argument('--config', required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('eval', help='evaluate a checkpoint or packed model on the test split')
    p.add_argument('--config', required=True)
    p.add_argument('--weights', required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser('export', help='write a packed model file from a training checkpoint')
    p.add_argument('--checkpoint', required=True)
    p.add_argument('--out', required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser('inspect', help='print header, census and bit statistics of a packed model')
    p.add_argument('file')
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser('bench', help='time the packed GEMM against a float-complex GEMM')
    p.add_argument('--sizes', type=int, nargs='+', default=None)
    p.add_argument('--rows', type=int, default=None)
    p.add_argument('--cols', type=int, default=None)
    p.add_argument('--repeats', type=int, default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser('sweep', help='norm x init ablation on one config')
    p.add_argument('--config', required=True)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.log_file)
    from errors import BCNNError

    logger.info(f"🚀 bcnn {args.command} starting...")
    start = time.time()
    try:
        code = args.func(args)
    except BCNNError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        code = e.exit_code
    except OSError as e:
        logger.error(f"❌ {e}")
        code = 2
    except Exception as e:
        logger.error(f"💥 {args.command} failed: {e}")
        code = 1
    logger.info(f"🏁 {args.command} finished in {time.time() - start:.1f} seconds (exit {code})")
    return code


if __name__ == "__main__":
    sys.exit(main())
