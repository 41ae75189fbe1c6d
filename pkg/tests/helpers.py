"""Small-model fixtures shared by the training, recommendation and CLI tests."""
from hintlm.backbone import BackboneConfig
from hintlm.comparator import ComparatorConfig
from hintlm.encoder import EncoderConfig
from hintlm.model import HintModel, PromptOptions
from hintlm.synthetic import plant_separable

D = 16


def tiny_configs(mode="TOY"):
    enc = EncoderConfig(d_p=16, layers=1, heads=2, buckets=8, sample_size=8, d_llm=D, proj_hidden=16)
    bb = BackboneConfig(d_llm=D, layers=1, heads=2, mode=mode, rank=2)
    return enc, bb, ComparatorConfig(d_llm=D)


def tiny_bundle(n_queries=6, seed=11, signal="text"):
    return plant_separable(n_queries=n_queries, seed=seed, signal=signal, buckets=8, sample_size=8)


def tiny_model(bundle, records, mode="TOY", prompt=None):
    enc, bb, cmp = tiny_configs(mode)
    return HintModel.create(records, bundle.catalog, bundle.stats, enc, bb, cmp, prompt or PromptOptions())
