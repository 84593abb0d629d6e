"""
Shared fixtures: shipped configs, BN-folded toy graphs and their quantized models
"""

import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
sys.path.insert(0, ROOT)

from model_graph import build_model, fold_bn, load_config
from quant_engine import QuantPolicy, calibrate, quantize_model, synthetic_calibration

CONFIG_DIR = os.path.join(ROOT, 'configs')
SHIPPED = ['effvit-b1-r224', 'effvit-b1-r256', 'effvit-b1-r288', 'effvit-b2-r224', 'effvit-b2-r256']


def config_path(name: str) -> str:
    return os.path.join(CONFIG_DIR, f"{name}.json")


def folded(name: str, seed: int = 0):
    return fold_bn(build_model(load_config(config_path(name)), seed=seed))


def shape_only(name: str):
    return build_model(load_config(config_path(name)), with_weights=False)


def quantized(graph, policy: QuantPolicy = None, samples: int = 16, seed: int = 0):
    calib = calibrate(graph, synthetic_calibration(graph, samples, seed))
    return calib, quantize_model(graph, calib, policy, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope='session')
def toy_mbconv():
    return folded('toy-mbconv')


@pytest.fixture(scope='session')
def toy_msa():
    return folded('toy-msa')


@pytest.fixture(scope='session')
def toy_effvit():
    return folded('toy-effvit')


@pytest.fixture(scope='session')
def toy_mbconv_quant(toy_mbconv):
    return quantized(toy_mbconv)


@pytest.fixture(scope='session')
def toy_msa_quant(toy_msa):
    return quantized(toy_msa)


@pytest.fixture(scope='session')
def toy_effvit_quant(toy_effvit):
    return quantized(toy_effvit)


def write_json(path, text: str) -> str:
    with open(path, 'w', encoding='utf-8') as f:
        f.write(text)
    return str(path)
