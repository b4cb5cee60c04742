"""Procedural trackbed strips with exact ground truth."""

from .dataset import (extract_patches, generate_dataset, iter_split, load_manifest, load_truth, manifest_hash,
                      patch_candidates, rle_decode, rle_encode, save_truth)
from .scene import ROI_NAMES, GroundTruth, SceneSpec, generate_strip, render_strip, sample_layout
