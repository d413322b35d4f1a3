import numpy as np
import pytest
import torch

from oneshot_vc import dsp
from oneshot_vc.corpus import CorpusConfig, build_corpus
from oneshot_vc.layers import LayerSpec

torch.set_num_threads(1)


def tone(freq, seconds=1.0, amp=0.5, rate=dsp.SAMPLE_RATE):
    t = np.arange(int(round(seconds * rate))) / rate
    return dsp.AudioClip(amp * np.sin(2 * np.pi * freq * t), rate)


def tiny_spec(**overrides) -> LayerSpec:
    """Narrow widths for fast unit tests (n_mels stays 80)."""
    base = dict(bn_dim=8, prenet_sizes=(16, 16), prenet_dropout=0.0, bank_size=3, bank_channels=8,
                proj_channels=16, highway_layers=2, highway_width=16, gru_hidden=8, postnet_channels=16,
                postnet_layers=2, ref_channels=(4, 4, 8, 8, 8, 8), ref_gru=16, classifier_hidden=16,
                decoder_rnn=16)
    base.update(overrides)
    return LayerSpec(**base)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """4 speakers (1 held out), 4 utterances each, about 1.5 s per utterance."""
    out = tmp_path_factory.mktemp("small_corpus")
    return build_corpus(CorpusConfig(out_dir=str(out), seed=3, n_speakers=4, utts_per_speaker=4,
                                     test_per_speaker=1, duration_range=(1.2, 1.6)))


@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The full desk experiment (style transfer and ablation), shared by slow tests."""
    from oneshot_vc.experiment import ExperimentConfig, run_style_transfer

    cfg = ExperimentConfig(str(tmp_path_factory.mktemp("desk_run")), seed=0)
    return cfg, run_style_transfer(cfg)


def finite_difference_check(loss_fn, params, n_probe=20, eps=1e-6, seed=0):
    """Compare autograd with central differences on ``n_probe`` random scalar entries.

    Returns a list of (name, index, analytic, numeric, relative error).
    The relative error uses ``max(|a|, |n|, 1e-6)`` as denominator so that
    vanishing gradients are compared absolutely.
    """
    named = [(n, p) for n, p in params if p.requires_grad]
    for _, p in named:
        p.grad = None
    loss_fn().backward()
    grads = {n: p.grad.detach().clone() for n, p in named}
    rng = np.random.default_rng(seed)
    out = []
    with torch.no_grad():
        for _ in range(n_probe):
            name, p = named[int(rng.integers(len(named)))]
            idx = tuple(int(rng.integers(s)) for s in p.shape)
            orig = p[idx].item()
            p[idx] = orig + eps
            up = loss_fn().item()
            p[idx] = orig - eps
            down = loss_fn().item()
            p[idx] = orig
            numeric = (up - down) / (2 * eps)
            analytic = grads[name][idx].item()
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-6)
            out.append((name, idx, analytic, numeric, rel))
    return out


@pytest.fixture(scope="session")
def toy_provider():
    """Untrained 8-dim toy encoder; enough to give aligned BN-like features."""
    from oneshot_vc.content import ContentProvider, ContentProviderConfig, ToyEncoder

    torch.manual_seed(0)
    return ContentProvider(ContentProviderConfig(dim=8), ToyEncoder(dim=8, hidden=16).eval())


@pytest.fixture(scope="session")
def toy_examples(small_corpus, toy_provider):
    """(training examples with labels and targets, one held-out-speaker example)."""
    from oneshot_vc.training import prepare_examples

    speakers = tuple(small_corpus.training_speakers())
    train = prepare_examples(small_corpus, toy_provider, small_corpus.by_split("train"), with_targets=True,
                             speakers=speakers)
    held = [r for r in small_corpus.by_split("heldout")]
    adapt = prepare_examples(small_corpus, toy_provider, held[:1], speakers=speakers)[0]
    return train, adapt


@pytest.fixture(scope="session")
def toy_adaptation(toy_examples):
    """Toy adaptation task: per seed, a briefly trained tiny phase-2 model and the adaptation example."""
    from oneshot_vc.model import ModelConfig, VCModel
    from oneshot_vc.training import PhaseConfig, phase2_train

    train, adapt = toy_examples
    speakers = tuple(sorted({e.speaker for e in train}, key=lambda s: min(e.label for e in train if e.speaker == s)))
    out = {}
    for seed in range(5):
        base = VCModel(ModelConfig(tiny_spec(), speakers), seed=seed)
        p2 = phase2_train(base, train, PhaseConfig.phase2(epochs=2, batch_size=4, crop_frames=64, seed=seed))
        out[seed] = p2.model
    return out, adapt


ACCEPTANCE: list[str] = []


def record_criterion(number: int, ok: bool, detail: str) -> str:
    line = f"CRITERION {number} {'PASS' if ok else 'FAIL'}: {detail}"
    ACCEPTANCE.append(line)
    return line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
