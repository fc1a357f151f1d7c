"""Corpus acquisition: Entrez E-utilities client, MEDLINE XML parsing and
the canonical JSONL corpus format."""

from __future__ import annotations

import datetime as _dt
import json
import logging
import os
import threading
import time
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import httpx

logger = logging.getLogger(__name__)

EUTILS_ENDPOINT = "https://eutils.ncbi.nlm.nih.gov/entrez/eutils/"
MAX_PAGE_SIZE = 10_000
MAX_BATCH_SIZE = 500
RETRY_ATTEMPTS = 3


class CorpusError(ValueError):
    pass


class MedlineParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class FetchError(RuntimeError):
    """A request kept failing after all retries.

    ``fetched`` and ``remaining`` describe the progress made before the abort.
    """

    def __init__(self, message: str, fetched: int = 0, remaining: int = 0):
        super().__init__(f"{message} (fetched {fetched}, remaining {remaining})")
        self.fetched = fetched
        self.remaining = remaining


@dataclass(frozen=True)
class Article:
    pmid: str
    title: str = ""
    abstract: str = ""
    descriptor_ids: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        return f"{self.title} {self.abstract}"

    def to_json(self) -> dict:
        return {
            "pmid": self.pmid,
            "title": self.title,
            "abstract": self.abstract,
            "descriptor_ids": list(self.descriptor_ids),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Article":
        return cls(
            pmid=str(obj["pmid"]),
            title=obj.get("title") or "",
            abstract=obj.get("abstract") or "",
            descriptor_ids=tuple(str(x) for x in obj.get("descriptor_ids", ())),
        )


@dataclass
class Corpus:
    articles: list[Article] = field(default_factory=list)
    descriptor_id: str | None = None

    def __post_init__(self):
        seen = set()
        for a in self.articles:
            if not a.pmid:
                raise CorpusError("article with empty pmid")
            if a.pmid in seen:
                raise CorpusError(f"duplicate pmid {a.pmid}")
            seen.add(a.pmid)
            if self.descriptor_id is not None and self.descriptor_id not in a.descriptor_ids:
                raise CorpusError(
                    f"article {a.pmid} is not annotated with descriptor {self.descriptor_id}")
        self._index = {a.pmid: i for i, a in enumerate(self.articles)}

    def __len__(self) -> int:
        return len(self.articles)

    def __iter__(self):
        return iter(self.articles)

    def __contains__(self, pmid) -> bool:
        return pmid in self._index

    @property
    def pmids(self) -> list[str]:
        return [a.pmid for a in self.articles]

    def get(self, pmid: str) -> Article:
        return self.articles[self._index[pmid]]

    def subset(self, pmids: Iterable[str]) -> "Corpus":
        return Corpus([self.get(p) for p in pmids], self.descriptor_id)


# -- JSONL corpus -----------------------------------------------------------

def save_corpus(corpus: Corpus, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for a in corpus.articles:
            fh.write(json.dumps(a.to_json(), ensure_ascii=False) + "\n")


def load_corpus(path: str | Path, descriptor_id: str | None = None) -> Corpus:
    """Read a JSONL corpus; duplicate pmids are rejected."""
    articles = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                a = Article.from_json(json.loads(line))
            except (json.JSONDecodeError, KeyError, TypeError, AttributeError) as e:
                raise CorpusError(f"{path}:{lineno}: malformed article line ({e})") from None
            if a.pmid in seen:
                raise CorpusError(
                    f"{path}:{lineno}: duplicate pmid {a.pmid} (first seen on line {seen[a.pmid]})")
            seen[a.pmid] = lineno
            articles.append(a)
    return Corpus(articles, descriptor_id)


# -- MEDLINE XML --------------------------------------------------------------

def _text(el: ET.Element | None) -> str:
    if el is None:
        return ""
    return " ".join("".join(el.itertext()).split())


def _byte_offset(data: bytes, line: int, column: int) -> int:
    lines = data.split(b"\n")
    return sum(len(l) + 1 for l in lines[: max(line - 1, 0)]) + column


def parse_medline_xml(data: bytes) -> list[Article]:
    """Extract articles from a ``PubmedArticleSet`` document.

    Abstract sections are joined with a single space and their labels are
    dropped. Inline markup is flattened and whitespace collapsed. Records
    without a PMID are skipped with a warning.
    """
    try:
        root = ET.fromstring(data)
    except ET.ParseError as e:
        line, col = e.position
        raise MedlineParseError(f"malformed MEDLINE XML: {e}", _byte_offset(data, line, col)) from None

    records = [root] if root.tag == "PubmedArticle" else root.iter("PubmedArticle")
    articles = []
    for i, rec in enumerate(records):
        citation = rec.find("MedlineCitation")
        pmid = _text(citation.find("PMID")) if citation is not None else ""
        if not pmid:
            logger.warning("skipping record %d: no PMID", i)
            continue
        art = citation.find("Article")
        title = _text(art.find("ArticleTitle")) if art is not None else ""
        sections = []
        if art is not None:
            for sec in art.findall("Abstract/AbstractText"):
                t = _text(sec)
                if t:
                    sections.append(t)
        descriptors = tuple(
            d.get("UI", "") for d in citation.findall("MeshHeadingList/MeshHeading/DescriptorName")
        )
        articles.append(Article(pmid, title, " ".join(sections), tuple(d for d in descriptors if d)))
    return articles


# -- E-utilities --------------------------------------------------------------

class RateLimiter:
    """Token bucket with capacity one: requests are spaced by ``1/rate`` s."""

    def __init__(self, rate: float, clock: Callable[[], float] = time.monotonic,
                 sleep: Callable[[float], None] = time.sleep):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.interval = 1.0 / rate
        self._clock = clock
        self._sleep = sleep
        self._next = 0.0
        self._lock = threading.Lock()

    def acquire(self) -> None:
        with self._lock:
            now = self._clock()
            if now < self._next:
                self._sleep(self._next - now)
                now = self._next
            self._next = now + self.interval


class EutilsClient:
    """Serialized, rate-limited access to one E-utilities endpoint.

    The API key and rate come from ``NCBI_API_KEY`` and ``NCBI_RATE_LIMIT``
    unless given explicitly.
    """

    def __init__(self, endpoint: str = EUTILS_ENDPOINT, *, api_key: str | None = None,
                 rate: float | None = None, http: httpx.Client | None = None,
                 sleep: Callable[[float], None] = time.sleep, backoff: float = 0.5):
        self.endpoint = endpoint.rstrip("/") + "/"
        self.api_key = api_key if api_key is not None else os.environ.get("NCBI_API_KEY")
        if rate is None:
            rate = float(os.environ.get("NCBI_RATE_LIMIT", "3"))
        self.limiter = RateLimiter(rate, sleep=sleep)
        self.http = http or httpx.Client(timeout=60.0)
        self._sleep = sleep
        self.backoff = backoff
        self._inflight = threading.Lock()
        self.requests_made = 0

    def request(self, util: str, params: dict) -> bytes:
        params = {"db": "pubmed", **params}
        if self.api_key:
            params["api_key"] = self.api_key
        url = self.endpoint + util
        last: Exception | None = None
        for attempt in range(RETRY_ATTEMPTS):
            with self._inflight:
                self.limiter.acquire()
                self.requests_made += 1
                try:
                    resp = self.http.post(url, data=params)
                except httpx.TransportError as e:
                    last = e
                else:
                    if resp.status_code == 200:
                        return resp.content
                    last = httpx.HTTPStatusError(
                        f"HTTP {resp.status_code} from {util}", request=resp.request, response=resp)
                    if resp.status_code != 429 and resp.status_code < 500:
                        break
            if attempt + 1 < RETRY_ATTEMPTS:
                self._sleep(self.backoff * 2 ** attempt)
        raise FetchError(f"{util} failed: {last}")


def search_pmids(descriptor_id: str, endpoint: str | EutilsClient = EUTILS_ENDPOINT,
                 page_size: int = MAX_PAGE_SIZE, term: str | None = None) -> list[str]:
    """All pmids manually annotated with ``descriptor_id`` (no MeSH explosion).

    Pages through esearch with retstart/retmax and de-duplicates while keeping
    the service order.
    """
    if not 0 < page_size <= MAX_PAGE_SIZE:
        raise ValueError(f"page_size must be in [1, {MAX_PAGE_SIZE}]")
    client = endpoint if isinstance(endpoint, EutilsClient) else EutilsClient(endpoint)
    term = term or f"{descriptor_id}[mh:noexp]"
    pmids: list[str] = []
    seen: set[str] = set()
    start = 0
    total = None
    while total is None or start < total:
        body = client.request("esearch.fcgi", {
            "term": term, "retstart": start, "retmax": page_size, "retmode": "xml"})
        try:
            root = ET.fromstring(body)
        except ET.ParseError as e:
            raise FetchError(f"malformed esearch response: {e}") from None
        count = root.findtext("Count")
        if count is None:
            err = root.findtext("ERROR") or "no Count element"
            raise FetchError(f"malformed esearch response: {err}")
        total = int(count)
        ids = [el.text.strip() for el in root.iterfind("IdList/Id") if el.text]
        for p in ids:
            if p not in seen:
                seen.add(p)
                pmids.append(p)
        if not ids:
            break
        start += page_size
    return pmids


@dataclass
class FetchResult:
    corpus: Corpus
    missing: list[str]
    not_annotated: list[str]
    requests: int
    snapshot: str

    def manifest(self) -> dict:
        return {
            "snapshot": self.snapshot,
            "articles": len(self.corpus),
            "missing": self.missing,
            "not_annotated": self.not_annotated,
            "requests": self.requests,
        }


def fetch_articles(pmids: Sequence[str], endpoint: str | EutilsClient = EUTILS_ENDPOINT,
                   batch_size: int = 200, descriptor_id: str | None = None,
                   state_dir: str | Path | None = None) -> FetchResult:
    """Retrieve MEDLINE records for ``pmids`` in efetch batches.

    With ``state_dir`` the fetch is resumable: fetched articles and the pmids
    already attempted are persisted after every batch, and a rerun only
    requests what is still outstanding. Articles whose MeSH annotations lack
    ``descriptor_id`` are reported instead of entering the corpus.
    """
    if not 1 <= batch_size <= MAX_BATCH_SIZE:
        raise ValueError(f"batch_size must be in [1, {MAX_BATCH_SIZE}]")
    client = endpoint if isinstance(endpoint, EutilsClient) else EutilsClient(endpoint)
    requests_before = client.requests_made

    got: dict[str, Article] = {}
    attempted: set[str] = set()
    state_articles = state_manifest = None
    if state_dir is not None:
        state_dir = Path(state_dir)
        state_dir.mkdir(parents=True, exist_ok=True)
        state_articles = state_dir / "articles.jsonl"
        state_manifest = state_dir / "fetch_state.json"
        if state_articles.exists():
            for a in load_corpus(state_articles):
                got[a.pmid] = a
        if state_manifest.exists():
            attempted = set(json.loads(state_manifest.read_text())["attempted"])

    order = list(dict.fromkeys(pmids))
    todo = [p for p in order if p not in attempted and p not in got]
    for i in range(0, len(todo), batch_size):
        batch = todo[i:i + batch_size]
        try:
            body = client.request("efetch.fcgi", {"id": ",".join(batch), "retmode": "xml"})
            records = parse_medline_xml(body)
        except (FetchError, MedlineParseError) as e:
            raise FetchError(f"batch starting at {batch[0]} failed: {e}",
                             fetched=len(got), remaining=len(todo) - i) from None
        wanted = set(batch)
        new = [a for a in records if a.pmid in wanted and a.pmid not in got]
        for a in new:
            got[a.pmid] = a
        attempted.update(batch)
        if state_dir is not None:
            with open(state_articles, "a", encoding="utf-8") as fh:
                for a in new:
                    fh.write(json.dumps(a.to_json(), ensure_ascii=False) + "\n")
            tmp = state_manifest.with_suffix(".tmp")
            tmp.write_text(json.dumps({"attempted": sorted(attempted)}))
            tmp.replace(state_manifest)

    missing = [p for p in order if p not in got]
    articles, not_annotated = [], []
    for p in order:
        if p not in got:
            continue
        a = got[p]
        if descriptor_id is not None and descriptor_id not in a.descriptor_ids:
            not_annotated.append(p)
        else:
            articles.append(a)
    return FetchResult(
        corpus=Corpus(articles, descriptor_id),
        missing=missing,
        not_annotated=not_annotated,
        requests=client.requests_made - requests_before,
        snapshot=_dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds"),
    )
