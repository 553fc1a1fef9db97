"""Character-level unsupervised domain adaptation for CTC recognizers at desk scale."""

from .adaptation import (
    AdaptationConfig,
    CentroidSet,
    assign_frame_labels,
    cdcl_loss,
    compute_centroids,
    dat_loss,
    discrimination_loss,
    gather_character_features,
    matching_loss,
    mmd_squared,
    total_loss,
)
from .autodiff import Tensor, adam_step, backward, grad_reverse, noam_lr
from .ctc import ctc_greedy_decode, ctc_loss
from .features import Waveform, augment_chain, compute_fbank
from .model import EncoderConfig, Recognizer, SymbolTable, asr_loss, load_checkpoint, save_checkpoint
from .synth import CorpusConfig, generate_corpus

__version__ = "0.1.0"
