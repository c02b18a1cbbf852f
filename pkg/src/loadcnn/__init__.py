"""LoadCNN: dual-channel 1-D CNN for day-ahead individual residential load forecasting."""

from .metrics import CostParams, cost_report, mae, nrmse, rmse
from .model import LoadCNNConfig, LoadCNNParams, Sample, default_config, forward, init_params, loss
from .training import TrainConfig, train

__version__ = "0.1.0"
