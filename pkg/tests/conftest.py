import hashlib
import inspect
import json

import numpy as np
import pytest

import pcattack.images
import pcattack.vae
from pcattack.images import make_shapes
from pcattack.vae import VaeTrainConfig, load_model, save_model, train_toy_vae

TRAIN_SEED, TEST_SEED = 1, 2
DESK_CONFIG = VaeTrainConfig()


def _cache_key(config, n):
    src = inspect.getsource(pcattack.vae) + inspect.getsource(pcattack.images)
    blob = json.dumps({"cfg": config.to_dict(), "n": n, "seed": TRAIN_SEED}, sort_keys=True) + src
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _trained(request, config, n=5000):
    """Train (or reuse a cached) desk-scale VAE; the cache is keyed on source + config."""
    cache_dir = request.config.cache.mkdir("pcattack-vae")
    path = cache_dir / f"vae-{_cache_key(config, n)}.pt"
    if path.exists():
        return load_model(path)
    vae = train_toy_vae(make_shapes(n, 32, TRAIN_SEED), config)
    save_model(vae, path)
    return vae


@pytest.fixture(scope="session")
def trained_vae(request):
    return _trained(request, DESK_CONFIG)


@pytest.fixture(scope="session")
def test_images():
    return make_shapes(100, 32, TEST_SEED)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
