# BCNN Configuration
# Defaults for every key the config file may set. A config file only
# overrides values; keys missing here are rejected.

MODEL_CONFIG = {
    'arch': 'small',               # small | nin | resnet | resnete
    'complex': True,               # False builds the real-valued BNN baseline
    'binary': True,                # False builds the full-precision (DNN) baseline
    'norm': 'cgbn',                # cgbn | cbn | bn
    'init': 'bcw',                 # bcw | xavier | rayleigh
    'rayleigh_mode': 'glorot',     # glorot | he
    'init_seed': 0,
    'base_channels': [32, 64],     # real-BNN widths; complex widths are scaled by 1/sqrt(2)
    'blocks_per_stage': 2,
    'in_channels': 1,
    'num_classes': 10,
    't_clip': 1.0,
    'pool_before_norm': False,
    'full_precision_blocks': [],
}

TRAIN_CONFIG = {
    'lr': 0.005,
    'lr_decay': 0.2,
    'milestones': [80, 150, 200, 240, 270],
    'epochs': 5,
    'batch_size': 100,
    'seed': 0,
    'beta1': 0.9,
    'beta2': 0.999,
    'adam_eps': 1e-08,
    'latent_clip': 1.0,
    'threads': 1,
    'prefetch': 0,
    'metrics_file': 'metrics.jsonl',
    'checkpoint': 'checkpoint.npz',
}

DATA_CONFIG = {
    'dataset': 'mnist',            # mnist | cifar10 | synthetic
    'path': 'data/mnist',
    'augment': False,              # crop + flip, meant for CIFAR-10
    'train_limit': 0,              # 0 = whole split
    'test_limit': 0,
}

SCHEDULE_PRESETS = {
    'cifar10': {'epochs': 300, 'milestones': [80, 150, 200, 240, 270], 'lr': 0.005, 'lr_decay': 0.2},
    # documented only, the ImageNet pipeline is not implemented
    'imagenet': {'epochs': 50, 'milestones': [25, 35, 40, 45], 'lr': 0.005, 'lr_decay': 0.2},
}

BENCH_CONFIG = {
    'sizes': [512, 1024, 4096],
    'rows': 128,
    'cols': 128,
    'repeats': 3,
    'seed': 0,
}

LOG_CONFIG = {
    'log_file': '',
    'log_level': 'INFO',
    'env_var': 'BCNN_LOG_LEVEL',
}
