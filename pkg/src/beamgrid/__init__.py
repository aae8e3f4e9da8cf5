"""Beam-training simulation and evaluation toolkit over synthetic city grids.

Builds per-pixel beam power tensors from multipath data, derives
ground-truth optimal-beam maps, and evaluates beam predictors with top-k
accuracy and throughput-ratio metrics; ships five training objectives with
verified analytic gradients and a small trainable per-pixel classifier.
"""

from .channel import (ArrayFrame, Beam, BeamspaceAngles, Codebook,
                      MultipathChannel, PathParams, beam_gain,
                      beamspace_angles, dft_codebook, effective_tensor,
                      global_to_array_frame, instantaneous_gain, optimal_beam,
                      sector_index, sector_select, steering_vector)
from .metrics import (EvalReport, LinkBudget, LosClass, exclusion_mask,
                      los_class_map, noise_power_dbm, snr, throughput_ratio,
                      topk_accuracy)
from .scene import (CityStyle, HeightMap, SceneChannels, SceneConfig, TxSite,
                    downscale_consistency, downscale_tensor_map,
                    effective_tensor_map, generate_city, place_tx, trace_paths)

__version__ = "0.1.0"
