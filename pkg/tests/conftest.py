"""Shared fixtures. Two tiers:

* mini_ws: 4 speakers x 10 utterances with quick oracles, for mechanics
  tests (trainkit, evalkit, cli).
* acc_ws (in test_acceptance.py): the full 8 x 40 directional-replication
  workspace; built once per session when acceptance tests run.
"""

import json
import logging

import pytest

from msmvc.config import load_config
from msmvc.pipeline import Workspace, gen_corpus, pretrain_oracles

logging.getLogger("msmvc").setLevel(logging.WARNING)

MINI_SEED = 77

# small-but-real model: fast enough for mechanics tests on one core
MINI_OVERRIDES = {
    "seed": MINI_SEED,
    "extractor": {"content_epochs": 4},
    "constraints": {"descriptor_epochs": 12},
    "convnet": {"d_enc": 48, "heads": 4, "conv_kernel": 7, "prenet_dim": 32,
                "decoder_rnn_dim": 48, "postnet_channels": 32},
    "stylenet": {"local_filters": [4, 4, 8, 8, 16, 16],
                 "global_filters": [4, 4, 8, 8, 16, 16],
                 "ssl_embed_dim": 8, "d_e": 4, "d_spk": 8},
    "trainkit": {"recon": {"epochs": 2, "batch_size": 8},
                 "finetune": {"epochs": 1, "batch_size": 8, "lr0": 1e-4},
                 "crop_frames": 72, "checkpoint_every": 100},
    "evalkit": {"gl_iters": 8},
}


@pytest.fixture(scope="session")
def mini_cfg():
    return load_config(overrides=json.loads(json.dumps(MINI_OVERRIDES)))


@pytest.fixture(scope="session")
def mini_ws(tmp_path_factory, mini_cfg):
    root = tmp_path_factory.mktemp("mini_ws")
    ws = Workspace(root)
    gen_corpus(ws, mini_cfg, n_speakers=4, n_utts=10, seed=MINI_SEED)
    pretrain_oracles(ws, mini_cfg)
    return ws


@pytest.fixture(scope="session")
def mini_trained(mini_ws, mini_cfg):
    """Both training stages of the 'full' variant on the mini workspace."""
    from msmvc.pipeline import train_variant
    results = train_variant(mini_ws, mini_cfg, "full")
    return mini_ws, results
