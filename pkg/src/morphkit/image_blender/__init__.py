from .losses import (FrozenFeatureExtractor, combine_image_losses, image_blend_loss, ms_ssim,
                     perceptual_loss)
from .networks import (BipartiteGraph, BlendGeneratorConfig, GraphReasoning, LandmarkGuidedGenerator,
                       PatchDiscriminator, build_discriminators, discriminate_pair, final_morph,
                       generate_intermediate, generate_morph, graph_conv, landmark_appearance_aggregation,
                       render_heatmaps)
from .training import BlendSample, GeneratorCheckpoint, log_columns, train_image_blender
