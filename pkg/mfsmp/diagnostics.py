"""
Health check and version diagnostics for mfsmp.
"""

import platform
from typing import Any, Dict


def health_check() -> Dict[str, Any]:
    """
    Check that the numerical stack imports and behaves.

    Returns:
        Dict[str, Any]: Health check results
    """
    results: Dict[str, Any] = {"components": {}}

    try:
        import numpy as np

        gen = np.random.Generator(np.random.Philox(key=[0, 1]))
        sample = gen.standard_normal(4)
        results["components"]["numpy"] = {
            "status": "ok" if np.all(np.isfinite(sample)) else "error",
            "version": np.__version__,
        }
    except Exception as e:
        results["components"]["numpy"] = {"status": "error", "error": str(e)}

    try:
        import numpy as np
        import scipy
        from scipy.linalg import expm

        identity = expm(np.zeros((2, 2)))
        results["components"]["scipy"] = {
            "status": "ok" if np.allclose(identity, np.eye(2)) else "error",
            "version": scipy.__version__,
        }
    except Exception as e:
        results["components"]["scipy"] = {"status": "error", "error": str(e)}

    try:
        import pydantic

        results["components"]["pydantic"] = {"status": "ok", "version": pydantic.VERSION}
    except Exception as e:
        results["components"]["pydantic"] = {"status": "error", "error": str(e)}

    results["overall_healthy"] = all(
        component.get("status") == "ok" for component in results["components"].values()
    )
    return results


def get_version_info() -> Dict[str, Any]:
    """
    Version information recorded in run manifests.

    Returns:
        Dict[str, Any]: Version information
    """
    try:
        import mfsmp

        version = mfsmp.__version__
    except Exception:
        version = "unknown"

    info = {"mfsmp_version": version, "python_version": platform.python_version()}
    for name in ("numpy", "scipy", "pydantic"):
        try:
            module = __import__(name)
            info[f"{name}_version"] = getattr(module, "__version__", getattr(module, "VERSION", "unknown"))
        except ImportError:
            info[f"{name}_version"] = "not installed"
    return info
