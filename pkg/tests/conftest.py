import pytest
import torch

from sodiff.data import ingest, synthetic_corpus, write_captions, write_corpus
from sodiff.diffusion import AutoencoderConfig, UNetConfig
from sodiff.saipe import SaipeConfig
from sodiff.text_prompt import HashTokenProvider, load_caption_file
from sodiff.time_predictor import PredictorConfig

torch.set_num_threads(1)

TINY_MODULES = dict(
    autoencoder=AutoencoderConfig(width=16, blocks=1),
    unet=UNetConfig(channels=(16, 32, 32), context_dim=8, heads=2),
    saipe=SaipeConfig(
        feat_channels=16, heads=2, rstb_count=1, stl_per_rstb=2, query_count=77, embed_dim=8, align_width=16, align_heads=2
    ),
    predictor=PredictorConfig(channels=(8, 8, 16, 16)),
)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("tiny")
    images, captions = synthetic_corpus(6, 64, seed=3, captions=True)
    paths = write_corpus(root / "img", images)
    write_captions(root / "captions.txt", [p.stem for p in paths], captions)
    index = ingest(root / "img")
    records = load_caption_file(root / "captions.txt", HashTokenProvider(dim=8))
    return root, index, records


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: primary acceptance criteria (slow, trains toy models)")


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.VERDICTS):
        terminalreporter.write_line(mod.VERDICTS[n])
