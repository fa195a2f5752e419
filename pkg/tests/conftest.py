import hashlib
import json
import os
import time

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")

import numpy as np
import pytest

import datagen
from seqattack import bench, data, models, weights_io

bench.limit_blas_threads()

CACHE_DIR = os.path.join(os.path.dirname(__file__), "..", ".testcache")

N_TRAIN, N_TEST = 20000, 4000
SEQ_TRAIN, SEQ_TEST = 8000, 1000
CLASSIFIER_EPOCHS = 3
SEQNET_EPOCHS = 14


def _corpus_tag() -> str:
    """Cache key: regenerating data or retraining invalidates stale blobs."""
    with open(os.path.join(os.path.dirname(__file__), "datagen.py"), "rb") as f:
        gen = f.read()
    cfg = f"{N_TRAIN}:{N_TEST}:{SEQ_TRAIN}:{CLASSIFIER_EPOCHS}:{SEQNET_EPOCHS}".encode()
    return hashlib.sha1(gen + cfg).hexdigest()[:10]


@pytest.fixture(scope="session")
def mnist_dir(tmp_path_factory):
    tag = _corpus_tag()
    path = os.path.join(CACHE_DIR, f"mnist-{tag}")
    marker = os.path.join(path, "done")
    if not os.path.exists(marker):
        datagen.make_mnist_dir(path, N_TRAIN, N_TEST, seed=0)
        with open(marker, "w") as f:
            f.write(tag)
    return path


@pytest.fixture(scope="session")
def train_samples(mnist_dir):
    return data.load_idx(os.path.join(mnist_dir, "train-images-idx3-ubyte"),
                         os.path.join(mnist_dir, "train-labels-idx1-ubyte"))


@pytest.fixture(scope="session")
def test_samples(mnist_dir):
    return data.load_idx(os.path.join(mnist_dir, "t10k-images-idx3-ubyte"),
                         os.path.join(mnist_dir, "t10k-labels-idx1-ubyte"))


def _cached_model(kind: str, path: str, train_fn):
    meta_path = path + ".meta"
    if os.path.exists(path) and os.path.exists(meta_path):
        with open(meta_path) as f:
            meta = json.load(f)
        return weights_io.load(path, expect_kind=kind), meta["train_seconds"]
    t0 = time.time()
    model = train_fn()
    seconds = time.time() - t0
    os.makedirs(os.path.dirname(path), exist_ok=True)
    weights_io.save(model, path)
    with open(meta_path, "w") as f:
        json.dump({"train_seconds": seconds}, f)
    return model, seconds


@pytest.fixture(scope="session")
def classifier_bundle(train_samples):
    tag = _corpus_tag()

    def fit():
        model = models.init_model(models.KIND_CLASSIFIER, 0)
        return models.train(model, train_samples, epochs=CLASSIFIER_EPOCHS,
                            lr=1e-3, batch_size=32, seed=0)

    return _cached_model(models.KIND_CLASSIFIER,
                         os.path.join(CACHE_DIR, f"classifier-{tag}.w"), fit)


@pytest.fixture(scope="session")
def classifier(classifier_bundle):
    return classifier_bundle[0]


@pytest.fixture(scope="session")
def seq_train_samples(train_samples):
    return data.synth_seqmnist(train_samples, SEQ_TRAIN, seed=11)


@pytest.fixture(scope="session")
def seq_test_samples(test_samples):
    return data.synth_seqmnist(test_samples, SEQ_TEST, seed=12)


@pytest.fixture(scope="session")
def seqnet_bundle(seq_train_samples):
    tag = _corpus_tag()

    def fit():
        model = models.init_model(models.KIND_SEQNET, 0)
        return models.train(model, seq_train_samples, epochs=SEQNET_EPOCHS,
                            lr=1e-3, batch_size=32, seed=0)

    return _cached_model(models.KIND_SEQNET,
                         os.path.join(CACHE_DIR, f"seqnet-{tag}.w"), fit)


@pytest.fixture(scope="session")
def seqnet(seqnet_bundle):
    return seqnet_bundle[0]


@pytest.fixture(scope="session")
def jobs():
    return min(4, os.cpu_count() or 1)
