"""Tree- and plot-level biomass and carbon bookkeeping.

Units are fixed throughout: wood density in g/cm^3, DBH in cm, height in m,
tree biomass in kg; plot totals are reported in Mg/ha and per-tree means in
kg. Carbon is 47% of dry biomass and CO2-equivalent is carbon times 3.67
(the 44/12 molecular weight ratio).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

from .errors import DataError

AGB_COEFF = 0.0673
AGB_EXPONENT = 0.976
CARBON_FRACTION = 0.47
CO2_PER_CARBON = 3.67
DEFAULT_WOOD_DENSITY = 0.6
MIN_DBH_CM = 5.0  # census threshold: stems below 5 cm DBH are not inventoried


@dataclass(frozen=True)
class TreeRecord:
    species: str
    wood_density: float
    dbh: float
    height: float

    def __post_init__(self):
        if not 0.1 < self.wood_density < 1.5:
            raise ValueError(f"wood density {self.wood_density} outside (0.1, 1.5) g/cm^3")
        if self.dbh < MIN_DBH_CM:
            raise ValueError(f"DBH {self.dbh} cm below the {MIN_DBH_CM} cm census threshold")
        if self.height <= 0:
            raise ValueError("height must be positive")

    @property
    def agb_kg(self) -> float:
        return tree_agb(self.wood_density, self.dbh, self.height)


@dataclass
class PlotInventory:
    plot_id: str
    area_m2: float
    trees: list[TreeRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.area_m2 <= 0:
            raise ValueError("plot area must be positive")

    @property
    def agb_total_kg(self) -> float:
        return sum(t.agb_kg for t in self.trees)


def tree_agb(wood_density: float, dbh: float, height: float) -> float:
    """Aboveground biomass of one tree in kg: 0.0673 * (rho * DBH^2 * H)^0.976."""
    if wood_density <= 0 or dbh <= 0 or height <= 0:
        raise ValueError("wood density, DBH and height must all be positive")
    return AGB_COEFF * (wood_density * dbh ** 2 * height) ** AGB_EXPONENT


def plot_totals(inventory: PlotInventory) -> tuple[float, float]:
    """(total AGB in Mg/ha, mean per-tree AGB in kg) for one plot."""
    if not inventory.trees:
        raise DataError(f"plot {inventory.plot_id} has no trees")
    total_kg = inventory.agb_total_kg
    agbt_mg_ha = total_kg / 1000.0 * (10_000.0 / inventory.area_m2)
    agbm_kg = total_kg / len(inventory.trees)
    return agbt_mg_ha, agbm_kg


def carbon(agb_mg: float) -> float:
    """Carbon stock (Mg C) held in `agb_mg` of dry biomass."""
    if agb_mg < 0:
        raise ValueError("biomass cannot be negative")
    return CARBON_FRACTION * agb_mg


def co2e(carbon_mg: float) -> float:
    """CO2 equivalent (Mg) of a carbon stock."""
    if carbon_mg < 0:
        raise ValueError("carbon cannot be negative")
    return CO2_PER_CARBON * carbon_mg


def read_density_csv(path) -> dict[str, float]:
    """species -> wood density table; header `species,rho`."""
    table = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                table[row["species"]] = float(row["rho"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad density row {row}") from exc
    return table


def read_inventory_csv(path, density: dict[str, float] | None = None,
                       default_density: float = DEFAULT_WOOD_DENSITY,
                       areas: dict[str, float] | None = None,
                       default_area_m2: float = 1000.0) -> list[PlotInventory]:
    """Load a tree list CSV into per-plot inventories.

    Expected columns: plot_id, species, dbh_cm, height_m and optionally rho.
    Densities resolve in order: per-row rho, the species table, the default.
    """
    density = density or {}
    plots: dict[str, PlotInventory] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                plot_id = row["plot_id"]
                rho = (float(row["rho"]) if row.get("rho") not in (None, "")
                       else density.get(row["species"], default_density))
                tree = TreeRecord(species=row["species"], wood_density=rho,
                                  dbh=float(row["dbh_cm"]), height=float(row["height_m"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad inventory row {row}") from exc
            if plot_id not in plots:
                area = (areas or {}).get(plot_id, default_area_m2)
                plots[plot_id] = PlotInventory(plot_id=plot_id, area_m2=area)
            plots[plot_id].trees.append(tree)
    return [plots[k] for k in sorted(plots)]


def write_plot_totals_csv(path, inventories: list[PlotInventory]) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("plot_id,area_m2,n_trees,AGBt_kg,AGBt_Mg_ha,AGBm_kg,carbon_Mg_ha,co2e_Mg_ha\n")
        for inv in inventories:
            agbt, agbm = plot_totals(inv)
            c = carbon(agbt)
            fh.write(f"{inv.plot_id},{inv.area_m2!r},{len(inv.trees)},"
                     f"{inv.agb_total_kg!r},{agbt!r},{agbm!r},{c!r},{co2e(c)!r}\n")


def read_plot_totals_csv(path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            try:
                out[row["plot_id"]] = {
                    "AGBt": float(row["AGBt_Mg_ha"]),
                    "AGBm": float(row["AGBm_kg"]),
                }
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"{path}: bad plot totals row {row}") from exc
    return out
