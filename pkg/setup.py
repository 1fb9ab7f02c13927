import setuptools

setuptools.setup(
    name="snadapter",
    version="0.0.1",
    author="Rhoban team",
    author_email="team@rhoban.com",
    description="Spatial-neighbor adapter: k-NN retrieval over prototypes fused with classifier logits",
    long_description="",
    long_description_content_type="text/markdown",
    packages=setuptools.find_packages(exclude=["tests"]),
    entry_points={
        "console_scripts": ["snadapter=snadapter.cli:main"],
    },
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    keywords="point cloud retrieval knn",
    install_requires=["numpy", "colorama", "optuna", "pandas", "tabulate"],
    extras_require={
        "dev": [
            "pytest",
            "wandb",
        ],
    },
    include_package_data=True,
    package_data={},
    python_requires=">=3.10",
)
