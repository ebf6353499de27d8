"""The video-NeRF: canonical human, deformation, and background sharing one parameter vector."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .deformation import RIGS, DeformationField
from .fields import BackgroundField, CanonicalHumanField, MLPConfig
from .geometry import EncodingConfig
from .params import Params

HUMAN, SCENE, DEFORM = "human", "scene", "deform"


@dataclass(frozen=True)
class ModelConfig:
    rig: str = "toy"
    human_mlp: MLPConfig = field(default_factory=lambda: MLPConfig(8, 256, (4,), -2.0))
    scene_mlp: MLPConfig = field(default_factory=lambda: MLPConfig(8, 256, (), 0.0))
    human_levels: int = 6
    scene_levels: int = 8
    deform_levels: int = 4
    deform_hidden: int = 64
    max_offset: float = 0.1
    skin_falloff: float = 0.05
    bbox_margin: float = 0.15


@dataclass
class VideoNeRF:
    params: Params
    human: CanonicalHumanField
    scene: BackgroundField
    deformation: DeformationField
    config: ModelConfig

    @classmethod
    def build(cls, config: ModelConfig = ModelConfig(), seed: int = 0, params: Params | None = None):
        rig = RIGS[config.rig]()
        human_enc = EncodingConfig(config.human_levels, "plain")
        scene_enc = EncodingConfig(config.scene_levels, "integrated")
        deformation = DeformationField(rig, None, EncodingConfig(config.deform_levels, "plain"),
                                       config.deform_hidden, config.max_offset, config.skin_falloff, DEFORM)
        layout = (CanonicalHumanField.layout_for(HUMAN, config.human_mlp, human_enc)
                  + BackgroundField.layout_for(SCENE, config.scene_mlp, scene_enc)
                  + deformation.layout())
        fresh = params is None
        if fresh:
            params = Params(layout)
        elif params.layout != Params(layout).layout:
            raise ValueError("checkpoint layout does not match the model configuration")
        bmin, bmax = deformation.canonical_bbox(config.bbox_margin)
        human = CanonicalHumanField(params, bmin, bmax, config.human_mlp, human_enc, HUMAN)
        scene = BackgroundField(params, config.scene_mlp, scene_enc, SCENE)
        deformation.params = params
        model = cls(params, human, scene, deformation, config)
        if fresh:
            rng = np.random.default_rng(seed)
            human.mlp.init(params, rng)
            scene.mlp.init(params, rng)
            deformation.init(params, rng)
        return model
