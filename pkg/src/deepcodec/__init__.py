"""Learned undersampled sensing and convolutional sparse recovery.

Two trainable pipelines built on hand-rolled numpy layers: a codec that learns
its own nonlinear measurements around a rearrange/subpixel permutation pair,
and a fixed-operator recovery net fronted by the adjoint back-projection.
An oracle-tuned L1 solver provides the classical baseline, and the
experiments module reproduces recovery-quality, phase-transition, training
race, and complexity comparisons at desk scale.
"""

__version__ = "0.1.0"

from .errors import ConfigError, NumericError, ShapeError
from .signal_core import (Dataset, MeasurementMatrix, PhasePoint, SparseSignal,
                          adjoint_proxy, gaussian_matrix, generate_dataset,
                          generate_sparse_signal, load_dataset, measure,
                          save_dataset, substream)
from .layers import (BatchNormParams, ConvParams, batchnorm_backward,
                     batchnorm_forward, conv1d_backward, conv1d_forward,
                     leaky_relu, rearrange_down, relu, subpixel_up)
from .networks import (LayerSpec, NetworkSpec, backward, build_deepcodec,
                       build_deepinverse, count_parameters, describe, encode,
                       forward, init_params, load_checkpoint, save_checkpoint)
from .training import TrainConfig, TrainReport, adam_step, mse_loss, sgd_step, \
    train
from .baselines import (LassoConfig, OracleResult, lambda_max, lasso_cd,
                        lasso_objective, lasso_oracle, soft_threshold)
from .experiments import (nmse, run_nmse_comparison, run_phase_grid,
                          run_training_curve, success_probability)
