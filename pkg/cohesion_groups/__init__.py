from .dataset import DatasetBundle, LabeledSet, Sample
from .model import Checkpoint, ModelSpec, ParamVector
from .trainer import OptimConfig, Trainer, TrainerState
from .cohesion import CohesionMatrix2D, CohesionTensor3D, SamplingConfig
from .analysis import GroupReport, PredictionReport
