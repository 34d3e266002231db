"""Build the optional compiled kernels; the package falls back to numpy without them."""
import os
import sys

from setuptools import setup

ext_modules = []
if os.environ.get("RMARN_NO_EXT") != "1":
    try:
        import numpy as np
        from Cython.Build import cythonize
        from setuptools import Extension

        compile_args = ["-O3", "-fno-math-errno", "-fno-trapping-math",
                        "-fassociative-math", "-fno-signed-zeros"]
        link_args = []
        if sys.platform.startswith("linux"):
            compile_args.append("-fopenmp")
            link_args.append("-fopenmp")
        ext_modules = cythonize(
            [
                Extension(
                    "rmarn.numcore._ckernels",
                    ["src/rmarn/numcore/_ckernels.pyx"],
                    include_dirs=[np.get_include()],
                    extra_compile_args=compile_args,
                    extra_link_args=link_args,
                )
            ],
            compiler_directives={"language_level": "3"},
        )
    except ImportError:
        print("Cython or numpy missing; building without compiled kernels", file=sys.stderr)

setup(ext_modules=ext_modules)
