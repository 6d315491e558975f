"""Two-party privacy-preserving K-means over additive secret shares."""

from .ring import (DEFAULT_CONFIG, FixedPointConfig, RingMatrix, RingSampler,
                   SparsePlainMatrix, decode_fixed, decode_matrix,
                   encode_fixed, encode_matrix, mat_op, prg_matrix,
                   sparse_dense_mul)
from .sharing import (AShare, MatrixTriple, beaver_matmul, beaver_mul, linear,
                      open_share, public_share, reconstruct, share, truncate)
from .boolean import (BitTriple, BShare, a2b, b2a, band, bxor, cmp, msb, mux,
                      open_bits)
from .kmeans import (KMeansConfig, PartitionSpec, normalize_minmax,
                     plaintext_kmeans)
from .dealer import (JobSpec, TripleBudget, TripleStore, compute_budget,
                     dealer_generate, he_generate, load_store, tree_plan,
                     write_store)
from .protocol import (ProtocolSession, RunResult, run_protocol,
                       secure_reciprocal)
from .transport import (Channel, Frame, RunMetrics, connect, loopback_pair)

__version__ = "0.1.0"
