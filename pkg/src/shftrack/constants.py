"""Physical constants. Units are km, s, rad unless noted."""
import math

MU_EARTH = 398600.4418  # km^3/s^2
R_EARTH = 6378.137  # km, equatorial
J2 = 1.08262668e-3
# Unnormalized zonal harmonics J2..J6 (EGM96-class values)
ZONALS = {
    2: 1.08262668e-3,
    3: -2.53265649e-6,
    4: -1.61962159e-6,
    5: -2.27296083e-7,
    6: 5.40681239e-7,
}

OMEGA_EARTH = 7.2921150e-5  # rad/s
# Earth rotation angle at the reference epoch (J2000), rad
ERA_J2000 = 2.0 * math.pi * 0.7790572732640
SIDEREAL_DAY = 2.0 * math.pi / OMEGA_EARTH

MU_SUN = 1.32712440018e11
MU_MOON = 4902.800066
AU = 149597870.7  # km
R_SUN = 696000.0  # km
# Solar radiation pressure at 1 AU, N/m^2
P_SRP_1AU = 4.56e-6

OBLIQUITY_J2000 = math.radians(23.43929111)

DAY = 86400.0
ARCSEC = math.pi / (180.0 * 3600.0)

GEO_PERIOD = 86164.0905
GEO_RADIUS = (MU_EARTH * GEO_PERIOD**2 / (4.0 * math.pi**2)) ** (1.0 / 3.0)
