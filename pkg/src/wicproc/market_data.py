"""Market data model, CSV/JSON readers and writers, and the non-WIC sales split.

A market is one state-month.  Each market carries its products (one row per
product in ``markets.csv``), market-level demographics, per-firm cost shifters
and national wholesale prices, and the identity of the current WIC contract
holder, if any.  Prices and wholesale prices are 2015 dollars per ounce and are
expected to be deflated before they reach this module.
"""
from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class DataError(ValueError):
    """Raised when an input file or in-memory market violates the schema."""


def _frozen_array(values) -> np.ndarray:
    arr = np.array(values, dtype=float)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Product:
    product_id: str
    firm_id: str
    is_auction_brand: bool
    characteristics: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "characteristics", _frozen_array(self.characteristics))


@dataclass(frozen=True)
class MarketConfig:
    market_id: str
    month: str
    products: tuple[Product, ...]
    prices: np.ndarray
    market_size: float
    wic_infants: float
    non_wic_infants: float
    demographics: Mapping[str, float]
    cost_shifters: Mapping[str, Mapping[str, float]]
    wholesale_prices: Mapping[str, float]
    winner: str | None = None
    char_names: tuple[str, ...] = ()
    # observed non-WIC market shares; needed only for demand estimation
    shares: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "products", tuple(self.products))
        object.__setattr__(self, "prices", _frozen_array(self.prices))
        if self.shares is not None:
            object.__setattr__(self, "shares", _frozen_array(self.shares))
        object.__setattr__(self, "demographics", dict(self.demographics))
        object.__setattr__(self, "cost_shifters",
                           {f: dict(v) for f, v in self.cost_shifters.items()})
        object.__setattr__(self, "wholesale_prices", dict(self.wholesale_prices))
        object.__setattr__(self, "char_names", tuple(self.char_names))
        validate_market(self)

    # convenience views -------------------------------------------------
    @property
    def n_products(self) -> int:
        return len(self.products)

    @property
    def firms(self) -> tuple[str, ...]:
        """Firm identifiers in order of first appearance."""
        seen: dict[str, None] = {}
        for p in self.products:
            seen.setdefault(p.firm_id, None)
        return tuple(seen)

    @property
    def firm_ids(self) -> np.ndarray:
        return np.array([p.firm_id for p in self.products], dtype=object)

    @property
    def auction_mask(self) -> np.ndarray:
        return np.array([p.is_auction_brand for p in self.products], dtype=bool)

    @property
    def X(self) -> np.ndarray:
        return np.vstack([p.characteristics for p in self.products])

    def products_of(self, firm: str) -> np.ndarray:
        return np.flatnonzero(self.firm_ids == firm)

    def auction_brand_of(self, firm: str) -> int:
        idx = np.flatnonzero((self.firm_ids == firm) & self.auction_mask)
        return int(idx[0])

    def replace(self, **changes) -> "MarketConfig":
        kw = {f: getattr(self, f) for f in self.__dataclass_fields__}
        kw.update(changes)
        return MarketConfig(**kw)


@dataclass(frozen=True)
class AuctionRecord:
    market_id: str
    firm_id: str
    wholesale: float
    rebate: float
    contract_length: float
    won: bool

    def __post_init__(self):
        if not self.wholesale > 0:
            raise DataError(f"auction {self.market_id}/{self.firm_id}: wholesale must be > 0")
        # rebates above the wholesale price do occur (ratio up to ~1.05)
        if not self.rebate >= 0:
            raise DataError(f"auction {self.market_id}/{self.firm_id}: rebate must be >= 0")


def validate_market(m: MarketConfig) -> None:
    where = f"market {m.market_id}"
    if not m.products:
        raise DataError(f"{where}: no products")
    J = len(m.products)
    if m.prices.shape != (J,):
        raise DataError(f"{where}: prices has length {m.prices.size}, expected {J}")
    if not np.all(np.isfinite(m.prices)) or np.any(m.prices <= 0):
        raise DataError(f"{where}: field 'price' must be strictly positive")
    if not m.market_size > 0:
        raise DataError(f"{where}: field 'market_size' must be > 0")
    if not m.wic_infants >= 0:
        raise DataError(f"{where}: field 'wic_infants' must be >= 0")
    if not m.non_wic_infants >= 0:
        raise DataError(f"{where}: field 'non_wic_infants' must be >= 0")
    k = m.products[0].characteristics.size
    for p in m.products:
        if p.characteristics.size != k:
            raise DataError(f"{where}: product {p.product_id} has {p.characteristics.size} "
                            f"characteristics, expected {k}")
    if m.char_names and len(m.char_names) != k:
        raise DataError(f"{where}: {len(m.char_names)} characteristic names for {k} columns")
    ids = [p.product_id for p in m.products]
    if len(set(ids)) != len(ids):
        raise DataError(f"{where}: duplicate product_id")
    for f in m.firms:
        n_auction = sum(p.is_auction_brand for p in m.products if p.firm_id == f)
        if n_auction != 1:
            raise DataError(f"{where}: firm {f} has {n_auction} auction brands, expected 1")
        if f not in m.wholesale_prices:
            raise DataError(f"{where}: firm {f} missing from wholesale prices")
        if f not in m.cost_shifters:
            raise DataError(f"{where}: firm {f} missing from cost shifters")
    if m.winner is not None and m.winner not in m.firms:
        raise DataError(f"{where}: winner {m.winner!r} owns no product")
    if m.shares is not None:
        if m.shares.shape != (J,):
            raise DataError(f"{where}: shares has length {m.shares.size}, expected {J}")


# ----------------------------------------------------------------------
# Appendix-style sales split

def non_wic_sales(total_sales: float, wic_bf_rate: float, n_wic: float,
                  overall_bf_rate: float, n_all: float) -> float:
    """Non-WIC part of a WIC brand's total sales.

    WIC formula-fed infants are ``(1 - wic_bf_rate) * n_wic`` out of
    ``(1 - overall_bf_rate) * n_all`` formula-fed infants overall; the rest of
    the sales are attributed to non-WIC buyers.  Eligible non-participants count
    as non-WIC.  A WIC fraction above one (sampling noise) clamps to zero sales
    with a warning.
    """
    if overall_bf_rate == 1 or n_all == 0:
        raise ZeroDivisionError("overall breastfeeding rate of 1 or zero infants")
    ratio = ((1.0 - wic_bf_rate) * n_wic) / ((1.0 - overall_bf_rate) * n_all)
    if ratio > 1.0:
        warnings.warn(f"WIC share of formula-fed infants is {ratio:.4f} > 1; "
                      "non-WIC sales clamped to 0", RuntimeWarning, stacklevel=2)
        return 0.0
    return (1.0 - ratio) * total_sales


# ----------------------------------------------------------------------
# I/O

_BASE_COLUMNS = ["market_id", "month", "firm_id", "product_id", "is_auction_brand", "price",
                 "share", "market_size", "wic_infants", "non_wic_infants", "wholesale", "winner"]
_AUCTION_COLUMNS = ["market_id", "firm_id", "wholesale", "rebate", "contract_length", "won"]


def _fmt(x: float) -> str:
    return repr(float(x))


def _parse_bool(s: str, where: str) -> bool:
    t = str(s).strip().lower()
    if t in ("1", "true", "t", "yes"):
        return True
    if t in ("0", "false", "f", "no"):
        return False
    raise DataError(f"{where}: cannot parse boolean {s!r}")


def _parse_float(s, where: str) -> float:
    try:
        return float(s)
    except (TypeError, ValueError):
        raise DataError(f"{where}: cannot parse number {s!r}") from None


def market_rows(markets: Iterable[MarketConfig]) -> tuple[list[str], list[dict]]:
    """Flatten markets into one dict per product, plus the column order."""
    markets = list(markets)
    chars: list[str] = []
    demos: list[str] = []
    shifters: list[str] = []
    for m in markets:
        names = m.char_names or tuple(f"c{k}" for k in range(m.products[0].characteristics.size))
        for n in names:
            if n not in chars:
                chars.append(n)
        for n in m.demographics:
            if n not in demos:
                demos.append(n)
        for sh in m.cost_shifters.values():
            for n in sh:
                if n not in shifters:
                    shifters.append(n)
    columns = (_BASE_COLUMNS[:6] + [f"x_{n}" for n in chars] + _BASE_COLUMNS[6:10]
               + [f"d_{n}" for n in demos] + [f"z_{n}" for n in shifters] + _BASE_COLUMNS[10:])
    rows = []
    for m in markets:
        names = m.char_names or tuple(f"c{k}" for k in range(m.products[0].characteristics.size))
        for j, p in enumerate(m.products):
            row = {
                "market_id": m.market_id, "month": m.month, "firm_id": p.firm_id,
                "product_id": p.product_id, "is_auction_brand": int(p.is_auction_brand),
                "price": _fmt(m.prices[j]),
                "share": "" if m.shares is None else _fmt(m.shares[j]),
                "market_size": _fmt(m.market_size), "wic_infants": _fmt(m.wic_infants),
                "non_wic_infants": _fmt(m.non_wic_infants),
                "wholesale": _fmt(m.wholesale_prices[p.firm_id]),
                "winner": m.winner or "",
            }
            for n, v in zip(names, p.characteristics):
                row[f"x_{n}"] = _fmt(v)
            for n, v in m.demographics.items():
                row[f"d_{n}"] = _fmt(v)
            for n, v in m.cost_shifters[p.firm_id].items():
                row[f"z_{n}"] = _fmt(v)
            rows.append(row)
    return columns, rows


def _markets_from_rows(rows: Sequence[Mapping[str, object]]) -> list[MarketConfig]:
    required = set(_BASE_COLUMNS) - {"share"}
    order: dict[str, list[tuple[int, Mapping]]] = {}
    for i, row in enumerate(rows, start=1):
        missing = required - set(row)
        if missing:
            raise DataError(f"row {i}: missing field(s) {sorted(missing)}")
        order.setdefault(str(row["market_id"]), []).append((i, row))

    markets = []
    for mid, items in order.items():
        i0, first = items[0]
        cols = list(first)
        xcols = [c for c in cols if c.startswith("x_")]
        dcols = [c for c in cols if c.startswith("d_")]
        zcols = [c for c in cols if c.startswith("z_")]
        products, prices, shares = [], [], []
        wholesale: dict[str, float] = {}
        shifters: dict[str, dict[str, float]] = {}
        market_level = ["month", "market_size", "wic_infants", "non_wic_infants", "winner"] + dcols
        for c in ["market_size", "wic_infants", "non_wic_infants"] + dcols:
            _parse_float(first[c], f"row {i0} field {c}")
        for i, row in items:
            where = f"row {i}"
            for c in market_level:
                if str(row.get(c, "")) != str(first.get(c, "")):
                    raise DataError(f"{where} field {c}: value differs from row {i0} of market {mid}")
            firm = str(row["firm_id"])
            products.append(Product(
                product_id=str(row["product_id"]), firm_id=firm,
                is_auction_brand=_parse_bool(row["is_auction_brand"], f"{where} field is_auction_brand"),
                characteristics=[_parse_float(row[c], f"{where} field {c}") for c in xcols]))
            prices.append(_parse_float(row["price"], f"{where} field price"))
            sh = row.get("share", "")
            shares.append(None if sh in ("", None) else _parse_float(sh, f"{where} field share"))
            wholesale[firm] = _parse_float(row["wholesale"], f"{where} field wholesale")
            shifters[firm] = {c[2:]: _parse_float(row[c], f"{where} field {c}") for c in zcols}
        winner = first["winner"]
        markets.append(MarketConfig(
            market_id=mid, month=str(first["month"]), products=products, prices=prices,
            market_size=_parse_float(first["market_size"], f"row {i0} field market_size"),
            wic_infants=_parse_float(first["wic_infants"], f"row {i0} field wic_infants"),
            non_wic_infants=_parse_float(first["non_wic_infants"], f"row {i0} field non_wic_infants"),
            demographics={c[2:]: _parse_float(first[c], f"row {i0} field {c}") for c in dcols},
            cost_shifters=shifters, wholesale_prices=wholesale,
            winner=None if winner in ("", None) else str(winner),
            char_names=tuple(c[2:] for c in xcols),
            shares=None if any(s is None for s in shares) else shares,
        ))
    return markets


def _guess_format(path: Path, format: str | None) -> str:
    if format:
        return format
    return "json" if path.suffix.lower() == ".json" else "csv"


def load_markets(path, format: str | None = None) -> list[MarketConfig]:
    """Read markets from ``markets.csv`` or its JSON mirror.

    Schema problems name the offending row and field; invariant violations
    name the market.
    """
    path = Path(path)
    fmt = _guess_format(path, format)
    if fmt == "csv":
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
        return _markets_from_rows(rows)
    if fmt == "json":
        data = json.loads(path.read_text())
        if not isinstance(data, list):
            raise DataError(f"{path}: expected a JSON array of market objects")
        rows = []
        for k, obj in enumerate(data):
            if "products" not in obj:
                raise DataError(f"market object {k}: missing field 'products'")
            base = {c: v for c, v in obj.items() if c != "products"}
            for prod in obj["products"]:
                rows.append({**base, **prod})
        return _markets_from_rows(rows)
    raise DataError(f"unknown format {fmt!r}")


def dumps_markets(markets: Iterable[MarketConfig], format: str = "csv") -> str:
    columns, rows = market_rows(markets)
    if format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=columns, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    if format == "json":
        product_cols = {"firm_id", "product_id", "is_auction_brand", "price", "share", "wholesale"}
        product_cols |= {c for c in columns if c.startswith(("x_", "z_"))}
        out: dict[str, dict] = {}
        for row in rows:
            mkt = out.setdefault(row["market_id"], {
                **{c: row[c] for c in columns if c not in product_cols}, "products": []})
            mkt["products"].append({c: row[c] for c in columns if c in product_cols})
        return json.dumps(list(out.values()), indent=1) + "\n"
    raise DataError(f"unknown format {format!r}")


def write_markets(markets: Iterable[MarketConfig], path, format: str | None = None) -> None:
    path = Path(path)
    path.write_text(dumps_markets(markets, _guess_format(path, format)))


def load_auctions(path, format: str | None = None) -> list[AuctionRecord]:
    path = Path(path)
    fmt = _guess_format(path, format)
    if fmt == "csv":
        with path.open(newline="") as fh:
            rows = list(csv.DictReader(fh))
    else:
        rows = json.loads(path.read_text())
    records = []
    for i, row in enumerate(rows, start=1):
        missing = set(_AUCTION_COLUMNS) - set(row)
        if missing:
            raise DataError(f"row {i}: missing field(s) {sorted(missing)}")
        where = f"row {i}"
        records.append(AuctionRecord(
            market_id=str(row["market_id"]), firm_id=str(row["firm_id"]),
            wholesale=_parse_float(row["wholesale"], f"{where} field wholesale"),
            rebate=_parse_float(row["rebate"], f"{where} field rebate"),
            contract_length=_parse_float(row["contract_length"], f"{where} field contract_length"),
            won=_parse_bool(row["won"], f"{where} field won")))
    return records


def dumps_auctions(records: Iterable[AuctionRecord], format: str = "csv") -> str:
    rows = [{"market_id": r.market_id, "firm_id": r.firm_id, "wholesale": _fmt(r.wholesale),
             "rebate": _fmt(r.rebate), "contract_length": _fmt(r.contract_length),
             "won": int(r.won)} for r in records]
    if format == "csv":
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=_AUCTION_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return buf.getvalue()
    return json.dumps(rows, indent=1) + "\n"


def write_auctions(records: Iterable[AuctionRecord], path, format: str | None = None) -> None:
    path = Path(path)
    path.write_text(dumps_auctions(records, _guess_format(path, format)))


def auctions_by_market(records: Iterable[AuctionRecord]) -> dict[str, dict[str, AuctionRecord]]:
    out: dict[str, dict[str, AuctionRecord]] = {}
    for r in records:
        out.setdefault(r.market_id, {})[r.firm_id] = r
    return out


def markets_equal(a: MarketConfig, b: MarketConfig) -> bool:
    """Field-by-field equality (numpy arrays compared exactly)."""
    for f in a.__dataclass_fields__:
        x, y = getattr(a, f), getattr(b, f)
        if f == "products":
            if len(x) != len(y):
                return False
            for p, q in zip(x, y):
                if (p.product_id, p.firm_id, p.is_auction_brand) != (q.product_id, q.firm_id, q.is_auction_brand):
                    return False
                if not np.array_equal(p.characteristics, q.characteristics):
                    return False
        elif isinstance(x, np.ndarray) or isinstance(y, np.ndarray):
            if x is None or y is None or not np.array_equal(x, y):
                return False
        elif x != y:
            return False
    return True


def generate_synthetic(spec=None, seed: int = 0) -> list[MarketConfig]:
    """Seeded synthetic markets; see :mod:`wicproc.synthetic`."""
    from .synthetic import generate_synthetic as _generate
    return _generate(spec, seed)
