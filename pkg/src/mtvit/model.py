"""The full model: shared backbone plus the three task heads.

Parameter names are stable and prefixed per component; optimizer groups
split them into the low-rate set (backbone, projector, text decoder)
and the high-rate set (depth and segmentation heads).
"""

from __future__ import annotations

from dataclasses import dataclass

from .backbone import BackboneConfig, VisionBackbone
from .caption import CaptionConfig, CaptionHead
from .depth import DepthHead
from .errors import ConfigError
from .seg import PromptEncoder, SegHead


@dataclass(frozen=True)
class DepthHeadConfig:
    width: int = 64

    def validate(self, key_prefix: str = "depth_head") -> None:
        if self.width < 2 or self.width % 2:
            raise ConfigError(f"{key_prefix}.width", "must be a positive even number")


@dataclass(frozen=True)
class SegHeadConfig:
    num_blocks: int = 2

    def validate(self, key_prefix: str = "seg_head") -> None:
        if self.num_blocks < 1:
            raise ConfigError(f"{key_prefix}.num_blocks", "need at least one block")


GROUPS = ("backbone", "projector", "decoder", "depth_head", "seg_head")


class MultiTaskModel:
    def __init__(self, backbone_cfg: BackboneConfig, caption_cfg: CaptionConfig,
                 depth_cfg: DepthHeadConfig, seg_cfg: SegHeadConfig, seed: int):
        backbone_cfg.validate()
        caption_cfg.validate()
        depth_cfg.validate()
        seg_cfg.validate()
        d = backbone_cfg.embed_dim
        self.backbone_cfg = backbone_cfg
        self.backbone = VisionBackbone(backbone_cfg, seed)
        self.caption = CaptionHead(d, backbone_cfg.tokens, caption_cfg, seed)
        self.depth = DepthHead(d, depth_cfg.width, seed)
        self.seg_prompt = PromptEncoder(caption_cfg.vocab_size, d, seed)
        self.seg = SegHead(d, backbone_cfg.patch_size, backbone_cfg.num_heads, seed,
                           num_blocks=seg_cfg.num_blocks)

    def named_params(self):
        yield from self.backbone.named_params("backbone")
        yield from self.caption.named_params("caption")
        yield from self.depth.named_params("depth")
        yield from self.seg_prompt.named_params("seg_prompt")
        yield from self.seg.named_params("seg")

    def num_params(self) -> int:
        return sum(p.size for _, p in self.named_params())

    def group(self, name: str) -> list:
        if name == "backbone":
            return list(self.backbone.named_params("backbone"))
        if name == "projector":
            return [(n, p) for n, p in self.caption.named_params("caption")
                    if n.startswith("caption/proj_")]
        if name == "decoder":
            return [(n, p) for n, p in self.caption.named_params("caption")
                    if not n.startswith("caption/proj_")]
        if name == "depth_head":
            return list(self.depth.named_params("depth"))
        if name == "seg_head":
            return list(self.seg_prompt.named_params("seg_prompt")) + \
                list(self.seg.named_params("seg"))
        raise ConfigError("train.trainable_groups", f"unknown group {name!r}")
