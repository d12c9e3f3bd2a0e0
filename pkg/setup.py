from setuptools import setup, find_packages

setup(
    name="BitSwitcher",
    version="1.0.0",
    packages=find_packages(exclude=["tests"]),
    py_modules=["BitSwitcher"],
    install_requires=[
        'numpy',
        'scipy',
        'tqdm',
    ],
    author="MSAM.media",
    description="Ein Python-Tool für quantisierte Super-Netze mit Bit-Breiten-Auswahl pro Eingabe",
    long_description=open('README.md').read(),
    long_description_content_type="text/markdown",
    classifiers=[
        "Programming Language :: Python :: 3",
        "License :: OSI Approved :: MIT License",
        "Operating System :: OS Independent",
    ],
    python_requires='>=3.8',
    entry_points={
        'console_scripts': [
            'bitswitcher=BitSwitcher:main',
        ],
    },
)
