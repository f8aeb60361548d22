from .config import TINY_MODEL, ModelConfig, PatchSpec
from .dsk import base_offsets, deformable_aggregate, dsk_block
from .embedding import (TokenGrid, apply_mask, mask_from_indices, patch_embed, patchify,
                        pixel_mask, positional_encoding, restore, sample_mask, unpatchify)
from .network import (encode, forward_reconstruction, forward_segmentation, masked_input,
                      reconstruct, segment)
from .params import (ENCODER_PREFIXES, ParameterStore, freeze_encoder, init_params,
                     reinit_segmentation_head)

__all__ = [
    "ModelConfig", "PatchSpec", "TINY_MODEL", "TokenGrid", "ParameterStore",
    "patch_embed", "patchify", "unpatchify", "positional_encoding", "sample_mask",
    "mask_from_indices", "apply_mask", "restore", "pixel_mask", "base_offsets",
    "deformable_aggregate", "dsk_block", "encode", "reconstruct", "segment",
    "masked_input", "forward_reconstruction", "forward_segmentation", "init_params",
    "freeze_encoder", "reinit_segmentation_head", "ENCODER_PREFIXES",
]
