from setuptools import setup

with open("README.md", "r", encoding="utf-8") as fh:
    long_description = fh.read()

with open("requirements.txt", "r", encoding="utf-8") as fh:
    requirements = fh.read().splitlines()

setup(
    name="vem-solver",
    version="0.1.0",
    author="VEM Solver Team",
    description="Variation-evolving solver for finite-horizon optimal control problems",
    long_description=long_description,
    long_description_content_type="text/markdown",
    py_modules=[
        "solver_errors",
        "time_grid",
        "ocp_model",
        "propagate",
        "transition",
        "compact_form",
        "primary_form",
        "evolve",
        "flows",
        "problems",
        "run_config",
        "vem_cli",
    ],
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Mathematics",
    ],
    python_requires=">=3.8",
    install_requires=requirements,
    entry_points={
        "console_scripts": [
            "vem-solve=vem_cli:main",
        ],
    },
)
