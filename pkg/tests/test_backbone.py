import pytest
import torch

from hintlm.backbone import (PRETRAINED_ENV, Backbone, BackboneConfig, BackboneMode, ContextOverflow,
                             LowRankLinear, apply_low_rank, build_backbone, checksum)
from hintlm.prompt import ComposedPrompt, PromptSegment

D = 32


def prompt(ids, rows):
    p = ComposedPrompt([PromptSegment.of_text("x")], 1024)
    p.token_ids, p.soft_rows = list(ids), list(rows)
    return p


def cfg(**kw):
    base = dict(d_llm=D, layers=2, heads=4, vocab_size=20, context_limit=64)
    base.update(kw)
    return BackboneConfig(**base)


def sample_inputs():
    p1 = prompt([3, 4, -1, -1, 5], [-1, -1, 0, 1, -1])
    p2 = prompt([6, -1, 7], [-1, 2, -1])
    softs = [torch.randn(2, D, dtype=torch.float64), torch.randn(3, D, dtype=torch.float64)]
    return [p1, p2], softs


def test_last_position_matches_full_forward():
    bb = build_backbone(cfg())
    prompts, softs = sample_inputs()
    full = bb.forward_full(prompts, softs)
    last = bb(prompts, softs)
    torch.testing.assert_close(last[0], full[0, 4], rtol=0, atol=1e-12)
    torch.testing.assert_close(last[1], full[1, 2], rtol=0, atol=1e-12)


def test_soft_rows_are_spliced_in():
    bb = build_backbone(cfg())
    prompts, softs = sample_inputs()
    x, last = bb.inputs(prompts, softs)
    pos = bb.pos_emb.weight
    torch.testing.assert_close(x[0, 2], softs[0][0] + pos[2])
    torch.testing.assert_close(x[1, 1], softs[1][2] + pos[1])
    torch.testing.assert_close(x[0, 0], bb.tok_emb.weight[3] + pos[0])
    assert last.tolist() == [4, 2]


def test_soft_gradient_flows():
    bb = build_backbone(cfg())
    prompts, softs = sample_inputs()
    softs = [s.requires_grad_() for s in softs]
    bb(prompts, softs).pow(2).sum().backward()
    assert softs[0].grad.abs().sum() > 0 and softs[1].grad.abs().sum() > 0


def test_context_overflow():
    bb = build_backbone(cfg(context_limit=4))
    prompts, softs = sample_inputs()
    with pytest.raises(ContextOverflow):
        bb(prompts, softs)


def test_low_rank_zero_init_is_bitwise_identical():
    bb = build_backbone(cfg())
    prompts, softs = sample_inputs()
    before = bb(prompts, softs)
    base_sum = checksum(bb.base_parameters())
    adapters = apply_low_rank(bb, 4)
    after = bb(prompts, softs)
    assert torch.equal(before, after)
    assert checksum(bb.base_parameters()) == base_sum
    assert len(adapters) == 2 * 4 * 2  # A and B for q/k/v/o in each of 2 blocks
    assert all(p.requires_grad for p in adapters)
    assert not any(p.requires_grad for p in bb.base_parameters())


def test_low_rank_weight_formula():
    lin = torch.nn.Linear(6, 5).double()
    lr = LowRankLinear(lin, 2)
    with torch.no_grad():
        lr.B.normal_()
    x = torch.randn(3, 6, dtype=torch.float64)
    torch.testing.assert_close(lr(x), x @ (lin.weight + lr.A @ lr.B).T + lin.bias)
    assert lr.A.shape == (5, 2) and lr.B.shape == (2, 6)


def test_training_adapters_leaves_base_untouched():
    bb = build_backbone(cfg(mode="LOWRANK", rank=2))
    base_sum = checksum(bb.base_parameters())
    opt = torch.optim.AdamW(bb.adapter_parameters(), lr=1e-2)
    prompts, softs = sample_inputs()
    for _ in range(3):
        opt.zero_grad()
        bb(prompts, softs).pow(2).sum().backward()
        opt.step()
    assert checksum(bb.base_parameters()) == base_sum


def test_pretrained_modes(tmp_path, monkeypatch):
    src = build_backbone(cfg(seed=7))
    path = tmp_path / "w.pt"
    torch.save(src.state_dict(), path)
    monkeypatch.setenv(PRETRAINED_ENV, str(path))
    frozen = build_backbone(cfg(mode=BackboneMode.FROZEN_PRETRAINED))
    assert checksum(frozen.base_parameters()) == checksum(src.base_parameters())
    assert not any(p.requires_grad for p in frozen.parameters())
    toy = build_backbone(cfg())  # TOY ignores pretrained weights
    assert checksum(toy.base_parameters()) != checksum(src.base_parameters())
    torch.save({"tok_emb.weight": torch.zeros(1)}, path)
    with pytest.raises(ValueError):
        build_backbone(cfg(mode="FROZEN_PRETRAINED"))


def test_config_validation():
    with pytest.raises(ValueError):
        BackboneConfig(d_llm=30, heads=4)
    with pytest.raises(ValueError):
        BackboneConfig(mode="LOWRANK", rank=0)
    with pytest.raises(ValueError):
        Backbone(BackboneConfig(vocab_size=0))
