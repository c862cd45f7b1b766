from .network import ModelSpec, NumericError, ParamSlot, ParamVector, Network
from .network import batch_risk, forward, get_network, grad, init_params, logits_batch, loss
from .network import per_sample_losses, risk_and_grad, spec_hash, zero_params
from .checkpoint import Checkpoint, CheckpointFormatError, read_checkpoint, write_checkpoint
