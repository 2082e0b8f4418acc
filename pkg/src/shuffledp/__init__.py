"""Differentially private protocols in the shuffle model: simulation, accounting and exact audits."""
from .accounting import (
    AccountantConfig,
    NoiseSpec,
    PrivacyBudget,
    amplify_blanket,
    amplify_subsampling,
    binomial_check_asymptotic,
    binomial_delta_exact,
    blanket_decompose,
    solve_rr_p,
)
from .audit import (
    AuditReport,
    Brittle1,
    Brittle2,
    DistributionTable,
    OnlineState,
    audit_neighbors,
    audit_robustness,
    enumerate_transcript_distribution,
    hockey_stick,
    online_wrap,
    removal_epsilon,
)
from .errors import (
    DomainError,
    EnumerationBudgetError,
    FormatError,
    IndeterminateResult,
    PreconditionError,
    ShuffleDPError,
    UncalibratedError,
)
from .histograms import CountMin, ExactHistogram, HashFamily, HistogramEstimate, OptInHistogram, ParallelHistogram
from .model import (
    ProtocolDescriptor,
    PublicRandomness,
    ShuffleProtocol,
    Transcript,
    execute,
    execute_partial,
    shuffle,
)
from .sums import BoundedSum, RandomizedResponse, SplitMix, SplitMixParams, Zsum

__version__ = "0.1.0"
