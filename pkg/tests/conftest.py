import time
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
import torch
import torch.nn.functional as F

from lococontrast.dataset import SynthConfig, generate_synthetic
from lococontrast.evalkit import ModelEmbedder, eval_sga_riga
from lococontrast.pairing import AnchorShortfallWarning
from lococontrast.trainer import TrainConfig, Trainer

# desk-scale run shared by the acceptance and trained-model tests
DESK_TRAIN_IMAGES = 2000
DESK_EVAL_IMAGES = 500
DESK_EVAL_START = 1_000_000  # disjoint from the training indices
DESK_DATA_SEED = 7
DESK_EPOCHS = 4

CRITERIA = pytest.StashKey[dict]()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def unit(rng, *shape, dtype=torch.float64):
    return F.normalize(torch.as_tensor(rng.normal(size=shape), dtype=dtype), dim=-1)


@pytest.fixture
def unit_vectors():
    return unit


@pytest.fixture(scope="session")
def desk_data(tmp_path_factory):
    """2000 training and 500 held-out synthetic 256 x 256 scenes."""
    root = tmp_path_factory.mktemp("desk")
    config = SynthConfig(seed=DESK_DATA_SEED)
    train = generate_synthetic(config, DESK_TRAIN_IMAGES, root / "train")
    held_out = generate_synthetic(config, DESK_EVAL_IMAGES, root / "eval", split="eval",
                                  start_index=DESK_EVAL_START)
    return SimpleNamespace(root=root, train=train, eval=held_out)


@pytest.fixture(scope="session")
def desk_run(desk_data):
    """Tiny backbone, B=4, A=10, default optimisation settings, trained once per session."""
    config = TrainConfig(epochs=DESK_EPOCHS, dataset=str(desk_data.root / "train" / "manifest.json"),
                         out_dir=str(desk_data.root / "run"), seed=0)
    trainer = Trainer(config)
    start = time.perf_counter()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", AnchorShortfallWarning)
        result = trainer.train()
    seconds = time.perf_counter() - start
    embedder = ModelEmbedder(trainer.crop_encoder, trainer.pyramid_encoder)
    report = eval_sga_riga(embedder, desk_data.eval, seed=0)
    return SimpleNamespace(config=config, trainer=trainer, result=result, seconds=seconds,
                           embedder=embedder, report=report, eval=desk_data.eval)


class CriterionLog:
    """Collects one PASS / FAIL / SKIP line per acceptance criterion."""

    def __init__(self, lines: dict):
        self.lines = lines

    def check(self, number: int, title: str):
        return _CriterionCheck(self.lines, number, title)


class _CriterionCheck:
    def __init__(self, lines, number, title):
        self.lines, self.number, self.title = lines, number, title
        self.detail = ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            status = "PASS"
        elif issubclass(exc_type, pytest.skip.Exception):
            status = "SKIP"
        else:
            status = "FAIL"
        line = f"criterion {self.number:>2} {status}  {self.title}"
        if self.detail:
            line += f"  ({self.detail})"
        self.lines[self.number] = line
        print(line)
        return False


@pytest.fixture
def criteria(request):
    return CriterionLog(request.config.stash.setdefault(CRITERIA, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(CRITERIA, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for number in sorted(lines):
            terminalreporter.write_line(lines[number])
