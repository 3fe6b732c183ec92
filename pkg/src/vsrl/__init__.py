"""Saliency-guided visual RL at desk scale.

Pipeline: collect sparse human saliency annotations (companion browser UI),
train a few-shot saliency predictor, pretrain a multimodal masked-autoencoder
encoder over RGB+saliency, and train/evaluate SAC policies with four
input-fusion variants, including generalization under color/video
observation perturbations.
"""

__version__ = "0.1.0"
