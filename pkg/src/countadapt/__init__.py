"""Density-map object counting with unsupervised adversarial domain adaptation.

A labeled source domain trains a U-Net-style density estimator with
supervised map and count losses; an unlabeled target domain contributes an
adversarial loss from a fully convolutional discriminator over the predicted
density maps, pulling the two output distributions together. Everything runs
on a self-contained numpy reverse-mode autodiff engine.
"""

from .autodiff import (ModelParams, Tensor, adam_step, backward, conv2d,
                       concat_channels, frozen, gradcheck, leaky_relu,
                       max_pool2d, mse_loss, no_grad, relu, sigmoid,
                       upsample_nearest2x)
from .data import (AnnotatedImage, BoundingBox, DensityKernelSpec, DensityMap,
                   SceneDomainParams, batch_iter, generate_density_map,
                   load_annotations, make_split, read_dmap, read_ppm,
                   synth_scene, write_dmap, write_ppm)
from .errors import (CheckpointError, ConfigError, CountAdaptError,
                     DimensionError, PlacementError, TrainingError, UsageError,
                     ValidationError)
from .evaluation import MetricsReport, compare_domains, evaluate
from .models import (DiscriminatorConfig, EstimatorConfig, discriminator_forward,
                     estimator_forward, init_params, load_checkpoint,
                     predict_count, save_checkpoint)
from .training import (StepReport, TrainConfig, adversarial_loss, density_loss,
                       discriminator_loss, train, train_step)

__version__ = "0.1.0"
