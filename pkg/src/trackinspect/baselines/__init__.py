from .hog import HogGeometry, block_features, cell_histograms, gradients, hog, hog_grid
from .otmach import (Correlation, DesignError, DesignWarning, HogFilter, MachFilter, baseline_scores,
                     correlate, filter_responses, intensity_normalize, load_filters, otmach_design,
                     otmach_hog_design, response_map, save_filters)
from .svm import fit_linear, margin, train_dual_pairs, train_one_vs_rest, train_pairwise
