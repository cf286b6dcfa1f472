"""Sharp regression-discontinuity estimation with cluster-robust inference."""
