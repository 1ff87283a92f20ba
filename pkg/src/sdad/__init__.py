"""Subgroup-aware dataset rebalancing and evaluation toolkit.

The package splits into dataset plumbing (manifest, embeddings), subgroup
identification (subgroups, captions), synthesis (backend, augmentor), and
measurement (metrics, reporting).  Everything downstream of a fixed seed is
deterministic, including the bundled mock backend, so full pipelines can be
replayed byte for byte.
"""

__version__ = "0.1.0"

from .errors import (  # noqa: F401
    BackendError,
    ConfigError,
    InvariantError,
    ParseError,
    SchemaError,
    SdadError,
    TaxonomyError,
)
from .manifest import (  # noqa: F401
    DatasetManifest,
    Dimension,
    SampleRecord,
    Subgroup,
    SubgroupTaxonomy,
    default_taxonomy,
    enumerate_subgroups,
    load_manifest,
    save_manifest,
)
from .embeddings import EmbeddingStore, StoreWriter, open_store, write_store  # noqa: F401
from .subgroups import (  # noqa: F401
    SubgroupDistribution,
    SubgroupTextBank,
    compute_distribution,
    identify_subgroup,
    label_dataset,
    underrepresented,
)
from .captions import (  # noqa: F401
    CaptionBundle,
    ClassPalette,
    PaletteClass,
    build_vlm_prompt,
    compose_caption,
    extract_classes,
    load_palette,
    scrub_subgroup_terms,
    style_sentence,
)
from .backend import BackendConfig, MockBackend, RemoteBackend, make_backend  # noqa: F401
from .augmentor import AugmentationPlan, augment_dataset, balance_targets  # noqa: F401
from .metrics import (  # noqa: F401
    ConfusionMatrix,
    DrivingSummary,
    FeatureStats,
    RouteResult,
    aggregate_driving,
    frechet_distance,
    infraction_score,
    matrix_sqrt_psd,
    mf1,
    miou,
)
from .reporting import SubgroupReport, render_report  # noqa: F401
from .rng import SplitMix64, fnv1a64, mix64, payload_hash, stream_seed  # noqa: F401
