"""Self-supervised object detection and segmentation by background inpainting.

A detector proposes one box per grid cell together with a probability over
cells.  Sampled boxes are erased and inpainted by a network trained only on
the scene's background statistics; boxes whose content cannot be predicted
from the surroundings are likely to hold the moving object.  A crop
autoencoder then reconstructs the object over the inpainted background,
which yields the segmentation mask.
"""

from .boxes import BoxGeometry, box_iou
from .config import TrainConfig, load_config
from .detector import Detector, DetectorConfig, ProposalSet, detect, sample_top_k
from .evalkit import EvalReport, evaluate_predictions, f_measure, j_measure, map50
from .inpainter import Inpainter, erase, train_inpainter
from .objectives import LossWeights, prob_prior, v_prior
from .sampler import SmoothedDistribution, draw, importance_estimate, smooth
from .segmenter import Segmenter, segment
from .stn import composite, crop, paste
from .synthdata import SceneConfig, SceneSample, generate_sequence, load_dataset, save_dataset
from .trainer import Model, Stage2Trainer, infer, train_stage2

__version__ = "0.1.0"
