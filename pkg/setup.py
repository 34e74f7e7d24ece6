from setuptools import setup, find_packages


setup(name='tpamodels',
      version='0.1.0',
      description=('Tensor product attention: factorized projections, '
                   'rotary embeddings, a factorized KV cache and blocked '
                   'decoding, with an analytic cost model'),
      license='MIT',
      packages=find_packages(exclude=['tests']),
      package_data={'tpamodels': ['data/*.json', 'data/*.jsonl']},
      python_requires='>=3.8',
      install_requires=['numpy', 'scipy', 'numba'],
      extras_require={'tests': ['pytest', 'hypothesis']},
      entry_points={'console_scripts': [
          'tpa=tpamodels.mainscripts.main:main']},
      zip_safe=False)
