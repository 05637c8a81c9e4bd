"""Cascaded linear filter-bank networks (PCA, random and LDA filters) with
binary hashing and block-histogram features."""

from .errors import (
    BadMagicError, ChecksumError, CountMismatchError, DataIntegrityError, DatasetError,
    InvalidConfigError, InvalidInputError, InvalidStateError, PCANetError, RankDeficiencyError,
    TruncatedFileError, UnsupportedVersionError,
)
from .linalg import EigenPairs, canonicalize_signs, pinv, sym_eig
from .imaging import (
    Occlude, Rotate, Scale, Translate, apply_deformation, correlate_stack, extract_patches,
    filter_image, read_pnm, write_pnm,
)
from .filters import (
    ClassScatter, FilterBank, export_filters, filter_grid, learn_lda_bank,
    learn_multichannel_pca_bank, learn_pca_bank, make_random_bank,
)
from .network import (
    NetworkConfig, NetworkModel, StageSpec, block_histograms, encode, encode_codes,
    extract_feature, extract_features, features_from_codes, load_model, save_model,
    single_stage_equivalent_config, spp_pool, train,
)
from .classify import (
    GalleryIndex, LinearSvmModel, WpcaProjector, chi_square_dist, cosine_dist, fit_wpca,
    nn_classify, sqrt_transform, svm_predict, svm_train,
)
from .dataio import (
    ExperimentConfig, LabeledDataset, load_config, load_idx, load_image_dir,
    make_deformed_testset, read_features, write_features,
)

__version__ = "0.1.0"
