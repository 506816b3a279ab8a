"""Build hooks for the optional compiled kernel core.

The package is fully functional without the extension (the numpy fallback is
selected at import time); the extension is attempted and skipped on any build
failure so that a plain Python environment can still install the package.
"""

from setuptools import setup

ext_modules = []
cmdclass = {}

try:
    from Cython.Build import cythonize
    from setuptools import Extension
    import numpy as np

    ext_modules = cythonize(
        [
            Extension(
                "vbtensor._backend._ckernels",
                ["src/vbtensor/_backend/_ckernels.pyx"],
                include_dirs=[np.get_include()],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        compiler_directives={
            "language_level": 3,
            "boundscheck": False,
            "wraparound": False,
            "initializedcheck": False,
            "cdivision": True,
        },
    )

    from setuptools.command.build_ext import build_ext

    class OptionalBuildExt(build_ext):
        """Swallow compiler failures; the runtime falls back to pure Python."""

        def run(self):
            try:
                super().run()
            except Exception as exc:  # pragma: no cover - toolchain dependent
                print(f"warning: compiled kernels skipped ({exc})")

        def build_extension(self, ext):
            try:
                super().build_extension(ext)
            except Exception as exc:  # pragma: no cover - toolchain dependent
                print(f"warning: extension {ext.name} skipped ({exc})")

    cmdclass["build_ext"] = OptionalBuildExt
except ImportError:  # pragma: no cover - Cython/numpy missing at build time
    pass

setup(ext_modules=ext_modules, cmdclass=cmdclass)
