import logging
import os
import tarfile
from typing import Optional

import requests

logger = logging.getLogger('cohesion_groups.fetch')

# Official binary distribution
CIFAR10_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR10_ARCHIVE = "cifar-10-binary.tar.gz"
# Directory inside the archive holding the batch files
CIFAR10_MEMBER_DIR = "cifar-10-batches-bin"
CIFAR10_BATCH_FILES = tuple(f'data_batch_{i}.bin' for i in range(1, 6)) + ('test_batch.bin',)
DOWNLOAD_TIMEOUT = 60


class FetchError(OSError):
    pass


class Cifar10Fetcher():
    def __init__(self, data_dir: str, url: Optional[str] = None) -> None:
        self.data_dir = os.path.abspath(data_dir)
        self.url = url if url is not None else CIFAR10_URL
        self.archive = os.path.join(self.data_dir, CIFAR10_ARCHIVE)
        self.batch_dir = os.path.join(self.data_dir, CIFAR10_MEMBER_DIR)

    def _complete(self) -> bool:
        return all(os.path.exists(os.path.join(self.batch_dir, name)) for name in CIFAR10_BATCH_FILES)

    def _download(self) -> None:
        logger.info("Downloading CIFAR-10 from %s", self.url)
        try:
            response = requests.get(self.url, stream=True, timeout=DOWNLOAD_TIMEOUT)
            response.raise_for_status()
        except requests.RequestException as exc:
            raise FetchError(f'download of {self.url} failed: {exc}') from exc
        partial = self.archive + '.part'
        with open(partial, 'wb') as outfile:
            for block in response.iter_content(chunk_size=1 << 20):
                outfile.write(block)
        os.replace(partial, self.archive)
        logger.info("Stored CIFAR-10 archive in %s", self.archive)

    def _extract(self) -> None:
        logger.info("Extracting %s", self.archive)
        try:
            with tarfile.open(self.archive, 'r:gz') as archive:
                if hasattr(tarfile, 'data_filter'):
                    archive.extractall(self.data_dir, filter='data')
                else:
                    archive.extractall(self.data_dir)  # nosec B202
        except tarfile.TarError as exc:
            raise FetchError(f'cannot extract {self.archive}: {exc}') from exc

    def fetch(self) -> str:
        '''Returns the directory holding the batch files, downloading them when missing'''
        if self._complete():
            logger.info("Using cached CIFAR-10 batches in %s", self.batch_dir)
            return self.batch_dir
        os.makedirs(self.data_dir, exist_ok=True)
        if not os.path.exists(self.archive):
            self._download()
        self._extract()
        if not self._complete():
            raise FetchError(f'{self.archive} does not contain the CIFAR-10 binary batches')
        return self.batch_dir


def fetch_cifar10(data_dir: str, url: Optional[str] = None) -> str:
    return Cifar10Fetcher(data_dir, url=url).fetch()
