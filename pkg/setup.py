"""Build script: compiles the optional iteration-kernel extension.

The package is fully functional without the extension (the pure-Python
engine in fastdual.solver); the build therefore degrades gracefully when
Cython or a C compiler is unavailable.
"""

import warnings

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext


class _OptionalBuildExt(build_ext):
    """build_ext that downgrades compilation failures to a warning."""

    def run(self):
        try:
            super().run()
        except Exception as exc:  # missing compiler, headers, ...
            warnings.warn(f"compiled kernels skipped: {exc}")

    def build_extension(self, ext):
        try:
            super().build_extension(ext)
        except Exception as exc:
            warnings.warn(f"compiled kernel {ext.name} skipped: {exc}")


def _extensions():
    import os

    if not os.path.exists("src/fastdual/_kernels.pyx"):
        return []
    try:
        import numpy as np
        from Cython.Build import cythonize
    except ImportError as exc:
        warnings.warn(f"compiled kernels skipped: {exc}")
        return []
    return cythonize(
        [
            Extension(
                "fastdual._kernels",
                ["src/fastdual/_kernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "cdivision": True,
        },
    )


setup(ext_modules=_extensions(), cmdclass={"build_ext": _OptionalBuildExt})
