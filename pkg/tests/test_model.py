"""Tests for the network."""
import pytest
import torch

from nightreid.config import ModelConfig
from nightreid.errors import InvalidArgumentError, MissingParametersError
from nightreid.model import CENet, SharedFeatures, import_pretrained, subnet_of


@pytest.fixture
def model(toy_config):
    """Return a seeded toy network."""
    torch.manual_seed(0)
    return CENet(toy_config)


@pytest.fixture
def images(generator, toy_config):
    """Return a batch of four toy images."""
    return torch.rand(4, 3, *toy_config.img_size, generator=generator)


CAMIDS = torch.tensor([0, 1, 0, 1])


def _grads_absent(params):
    return all(p.grad is None or not p.grad.any() for _, p in params)


def _grads_present(params):
    return any(p.grad is not None and p.grad.any() for _, p in params)


def test_token_counts(toy_config):
    """Test the token count follows the patch grid."""
    assert ModelConfig().num_patches + 1 == 129
    assert toy_config.num_patches + 1 == 33


def test_patch_embed_shape_and_camera(model, images):
    """Test embedding shape and camera lookup determinism."""
    tokens = model.patch_embed(images, CAMIDS, "real")
    assert tokens.shape == (4, 33, 64)

    camera = model.embed.camera_term(CAMIDS, "real")
    assert torch.equal(camera[0], camera[2])
    assert not torch.equal(camera[0], camera[1])


def test_camera_coefficient_zero(toy_config, images):
    """Test a zero coefficient makes the embedding independent of camid."""
    net = CENet(ModelConfig.preset("toy", num_classes={"real": 4}, num_cameras={"real": 2}, camera_coef=0.0))
    same = torch.zeros(4, dtype=torch.long)

    assert torch.equal(net.patch_embed(images, CAMIDS, "real"), net.patch_embed(images, same, "real"))


def test_patch_embed_errors(model, images):
    """Test camid range and domain validation."""
    with pytest.raises(InvalidArgumentError):
        model.patch_embed(images, torch.tensor([0, 1, 2, 0]), "real")
    with pytest.raises(InvalidArgumentError):
        model.patch_embed(images, CAMIDS, "daylight")
    with pytest.raises(InvalidArgumentError):
        model.patch_embed(images[:, :, :32], CAMIDS, "real")


def test_shared_encode_shape_and_determinism(model, images):
    """Test the shared encoder preserves shape and is deterministic in eval mode."""
    model.eval()
    tokens = model.patch_embed(images, CAMIDS, "real")
    first = model.shared_encode(tokens)
    second = model.shared_encode(tokens)

    assert first.full.shape == (4, 33, 64)
    assert first.patches_only.shape == (4, 32, 64)
    assert torch.equal(first.full, second.full)
    assert torch.equal(first.patches_only, first.full[:, 1:])


def test_shared_encoder_permutation_equivariance(model, generator):
    """Test swapping two tokens swaps the outputs."""
    tokens = torch.randn(2, 33, 64, generator=generator)
    perm = torch.arange(33)
    perm[[3, 7]] = perm[[7, 3]]

    out = model.shared(tokens)
    permuted = model.shared(tokens[:, perm])
    assert torch.allclose(permuted, out[:, perm], atol=1e-5)


def test_reid_head_shapes(model, images):
    """Test descriptor and logit sizes."""
    out = model(images, CAMIDS, "synthetic", branches=("reid",))

    assert out.reid.feat.shape == (4, 64)
    assert out.reid.global_feat.shape == (4, 64)
    assert out.reid.logits.shape == (4, 4)
    assert out.reid.high_tokens.shape == (4, 32, 64)
    assert out.retinex is None


def test_reid_head_routing(model, images):
    """Test a synthetic-domain loss never touches the real head."""
    out = model(images, CAMIDS, "synthetic", branches=("reid",))
    out.reid.logits.sum().backward()

    assert model.reid.classifiers["real"].weight.grad is None
    assert model.reid.classifiers["synthetic"].weight.grad.any()


def test_reid_feature_independent_of_logits(model, images):
    """Test the descriptor does not depend on whether logits are requested."""
    model.eval()
    shared = model.shared_encode(model.patch_embed(images, CAMIDS, "real"))

    with_logits = model.reid_head(shared, "real")
    without = model.reid_head(shared, "real", with_logits=False)
    assert torch.equal(with_logits.feat, without.feat)
    assert without.logits is None
    with pytest.raises(InvalidArgumentError):
        model.reid_head(shared, "daylight")


def test_relight_decode_contract(model, images):
    """Test Retinex output shapes, range and token shape."""
    out = model(images, CAMIDS, "real")

    assert out.retinex.reflectance.shape == (4, 3, 64, 32)
    assert out.retinex.illumination.shape == (4, 1, 64, 32)
    for tensor in (out.retinex.reflectance, out.retinex.illumination):
        assert tensor.min().item() > 0.0 and tensor.max().item() < 1.0
    assert out.relight.tokens.shape == out.reid.high_tokens.shape


def test_relight_decode_shape_mismatch(model, images):
    """Test features from another batch are rejected."""
    shared = model.shared_encode(model.patch_embed(images, CAMIDS, "real"))

    with pytest.raises(InvalidArgumentError):
        model.relight_decode(SharedFeatures(shared.full[:2]), images)


def test_parameter_partition(model):
    """Test the three groups are disjoint and cover the model."""
    groups = model.parameter_groups()
    names = [name for params in groups.values() for name, _ in params]

    assert len(names) == len(set(names))
    assert set(names) == {name for name, _ in model.named_parameters()}
    assert all(subnet_of(name) == "shared" for name, _ in groups["shared"])
    assert groups["reid"] and groups["relight"]


def test_gradient_routing(model, images):
    """Test each branch's loss only reaches its own subnet and the shared one."""
    groups = model.parameter_groups()
    out = model(images, CAMIDS, "real")
    (out.reid.feat.sum() + out.reid.logits.sum()).backward()
    assert _grads_absent(groups["relight"])
    assert _grads_present(groups["shared"])

    model.zero_grad(set_to_none=True)
    out = model(images, CAMIDS, "real")
    out.retinex.reflectance.mean().backward()
    assert _grads_absent(groups["reid"])
    assert _grads_present(groups["shared"])


def test_reid_only_forward_leaves_decoder_untouched(model, images):
    """Test the relighting subnet is not evaluated on the ReID path."""
    out = model(images, CAMIDS, "real", branches=("reid",))
    out.reid.global_feat.sum().backward()

    assert all(p.grad is None for _, p in model.parameter_groups()["relight"])


def test_infer_matches_training_path(model, images):
    """Test infer returns the eval-mode forward descriptor."""
    model.eval()
    with torch.no_grad():
        feat = model.infer(images, CAMIDS, "real")
        again = model.infer(images, CAMIDS, "real")
        forward = model(images, CAMIDS, "real").reid.feat

    assert torch.equal(feat, again)
    assert torch.equal(feat, forward)


def test_infer_without_relight_subnet(model, images, toy_config):
    """Test a model without the relighting subnet gives bit-identical features."""
    stripped = CENet(toy_config, with_relight=False)
    stripped.load_state_dict({k: v for k, v in model.state_dict().items() if subnet_of(k) != "relight"})
    model.eval()
    stripped.eval()
    with torch.no_grad():
        assert torch.equal(stripped.infer(images, CAMIDS, "real"), model.infer(images, CAMIDS, "real"))
    with pytest.raises(MissingParametersError):
        stripped.enhance(images)


def test_enhance_without_reid_subnet(model, images, toy_config):
    """Test enhancement needs neither camera ids nor the ReID subnet."""
    relight_only = CENet(toy_config, with_reid=False)
    relight_only.load_state_dict({k: v for k, v in model.state_dict().items() if subnet_of(k) != "reid"})
    model.eval()
    relight_only.eval()
    with torch.no_grad():
        expected = model.enhance(images).reflectance
        assert torch.equal(relight_only.enhance(images).reflectance, expected)
    assert relight_only.subnets == ("shared", "relight")


def test_unshared_encoder(toy_config, images):
    """Test disabling parameter sharing gives the relighting subnet its own embedding and encoder."""
    torch.manual_seed(0)
    shared = CENet(toy_config)
    separate = CENet(ModelConfig.preset(
        "toy", num_classes=toy_config.num_classes, num_cameras=toy_config.num_cameras, share_encoder=False
    ))
    count = {k: sum(p.numel() for _, p in v) for k, v in shared.parameter_groups().items()}
    count_sep = {k: sum(p.numel() for _, p in v) for k, v in separate.parameter_groups().items()}
    copied = sum(p.numel() for p in shared.shared.parameters()) + sum(p.numel() for p in shared.embed.parameters())

    assert count_sep["relight"] - count["relight"] == copied
    assert count_sep["shared"] == count["shared"]

    out = separate(images, CAMIDS, "real")
    out.retinex.reflectance.mean().backward()
    assert all(p.grad is None for _, p in separate.parameter_groups()["shared"])
    assert separate.relight.embed.proj.weight.grad.any()
    assert separate.relight.embed.camera_embed["real"].grad.any()


def test_unshared_enhance_ignores_shared_group(toy_config, images):
    """Test relighting without sharing does not depend on the shared embedding."""
    torch.manual_seed(0)
    model = CENet(ModelConfig.preset(
        "toy", num_classes=toy_config.num_classes, num_cameras=toy_config.num_cameras, share_encoder=False
    ))
    before = model.enhance(images).reflectance
    with torch.no_grad():
        model.embed.proj.weight.add_(1.0)
        model.shared.blocks[0].mlp.fc1.bias.add_(1.0)

    assert torch.equal(model.enhance(images).reflectance, before)


def test_import_pretrained_vit_names(model, toy_config):
    """Test plain ViT names are split between the shared and ReID encoders."""
    torch.manual_seed(1)
    source = CENet(toy_config)
    state = {
        "cls_token": source.embed.cls_token.detach(),
        "patch_embed.proj.weight": source.embed.proj.weight.detach(),
        "blocks.0.attn.qkv.weight": source.shared.blocks[0].attn.qkv.weight.detach(),
        "blocks.2.mlp.fc1.bias": source.reid.encoder.blocks[0].mlp.fc1.bias.detach(),
        "blocks.9.mlp.fc1.bias": torch.zeros(256),
        "norm.weight": torch.full((64,), 2.0),
        "head.weight": torch.zeros(1000, 64),
        "pos_embed": torch.zeros(1, 17, 64),
        "blocks.1.attn.proj.weight": torch.zeros(3, 3),
    }
    report = import_pretrained(model, state)

    assert torch.equal(model.embed.cls_token, source.embed.cls_token)
    assert torch.equal(model.shared.blocks[0].attn.qkv.weight, source.shared.blocks[0].attn.qkv.weight)
    assert torch.equal(model.reid.encoder.blocks[0].mlp.fc1.bias, source.reid.encoder.blocks[0].mlp.fc1.bias)
    assert torch.equal(model.reid.norm.weight, torch.full((64,), 2.0))
    assert torch.equal(model.embed.pos_embed, torch.zeros(1, 33, 64))
    assert {"head.weight", "blocks.9.mlp.fc1.bias", "blocks.1.attn.proj.weight"} <= set(report.skipped)
    assert "relight.task_embed" in report.missing


def test_import_pretrained_skips_relight(model, toy_config):
    """Test relighting tensors are never imported, even under their own names."""
    before = model.relight.task_embed.detach().clone()
    state = {
        "relight.task_embed": torch.ones(1, 1, 64),
        "relight.norm.weight": torch.full((64,), 3.0),
        "shared.blocks.0.norm1.weight": torch.full((64,), 2.0),
    }
    report = import_pretrained(model, state)

    assert torch.equal(model.relight.task_embed, before)
    assert not torch.equal(model.relight.norm.weight, torch.full((64,), 3.0))
    assert torch.equal(model.shared.blocks[0].norm1.weight, torch.full((64,), 2.0))
    assert {"relight.task_embed", "relight.norm.weight"} <= set(report.skipped)
    assert report.loaded == ["shared.blocks.0.norm1.weight"]
