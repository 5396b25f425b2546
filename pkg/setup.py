"""
Setup file for path_rwkv package.
Uses pyproject.toml for configuration.
"""
from setuptools import setup, find_packages

setup(
    name="path-rwkv",
    version="0.1.0",
    packages=find_packages(where="src"),
    package_dir={"": "src"},
    package_data={"path_rwkv": ["config/*.yaml"]},
    python_requires=">=3.9",
    install_requires=[
        "torch>=2.0",
        "numpy",
        "pyyaml",
        "pandas",
        "scikit-learn",
    ],
    entry_points={
        "console_scripts": [
            "path-rwkv=path_rwkv.app:main",
        ],
    },
)
