"""Build script: compiles the optional native kernel extension.

The package is fully functional without the extension (a numpy fallback is
selected at import time), so any build failure here downgrades to a pure
Python install instead of aborting.
"""

import sys

from setuptools import setup

ext_modules = []
cmdclass = {}

try:
    import numpy
    from Cython.Build import cythonize
    from setuptools import Extension
    from setuptools.command.build_ext import build_ext

    class OptionalBuildExt(build_ext):
        """Skip the extension (with a notice) when no compiler is usable."""

        def run(self):
            try:
                super().run()
            except Exception as exc:  # CompileError, DistutilsError, ...
                print(f"seqcomp: native kernels not built ({exc}); "
                      "using pure-Python fallback", file=sys.stderr)

        def build_extension(self, ext):
            try:
                super().build_extension(ext)
            except Exception as exc:
                print(f"seqcomp: skipping {ext.name}: {exc}", file=sys.stderr)

    ext_modules = cythonize(
        [
            Extension(
                "seqcomp.kernels._native",
                sources=["src/seqcomp/kernels/_native.pyx"],
                include_dirs=[numpy.get_include()],
                extra_compile_args=["-O3"],
                define_macros=[("NPY_NO_DEPRECATED_API", "NPY_1_7_API_VERSION")],
            )
        ],
        language_level="3",
    )
    cmdclass = {"build_ext": OptionalBuildExt}
except ImportError as exc:
    print(f"seqcomp: Cython/numpy unavailable at build time ({exc}); "
          "building pure-Python package", file=sys.stderr)

setup(ext_modules=ext_modules, cmdclass=cmdclass)
