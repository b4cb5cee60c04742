from .model import (FASTENER_WINDOW, MATERIAL_PATCH, MTLNet, NetConfig, build_network, map_size,
                    material_geometry, model_from_tensors, model_tensors, trunk_geometry, validate_config)
from .loss import TaskWeights, TrainBatch, align_cell, mtl_loss
from .infer import ScoreMaps, infer_fastener_features, infer_scoremaps, roi_features, segment
from .data import (BatchComposer, BatchSizes, MaterialPool, NormalizeConfig, TrainingPools, WindowPool, build_pools,
                   compose_batch, normalize_pixels)
from .train import TrainConfig, load_model, save_model, stl_config, train, train_stl, write_trace_csv
