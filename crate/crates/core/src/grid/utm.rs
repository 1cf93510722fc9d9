//! Transverse Mercator on the WGS84 ellipsoid using Krüger's series to sixth
//! order in the third flattening. Accurate to well under a millimetre
//! within a UTM zone.

use super::{GeoCoord, GridError, UtmCoord};

const A: f64 = 6_378_137.0;
const F: f64 = 1.0 / 298.257_223_563;
const K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;

struct Series {
    e: f64,
    /// Rectifying radius.
    a_rect: f64,
    alpha: [f64; 6],
    beta: [f64; 6],
}

fn series() -> &'static Series {
    use std::sync::OnceLock;
    static S: OnceLock<Series> = OnceLock::new();
    S.get_or_init(|| {
        let n = F / (2.0 - F);
        let n2 = n * n;
        let n3 = n2 * n;
        let n4 = n3 * n;
        let n5 = n4 * n;
        let n6 = n5 * n;
        let e = (F * (2.0 - F)).sqrt();
        let a_rect = A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);
        let alpha = [
            n / 2.0 - 2.0 * n2 / 3.0 + 5.0 * n3 / 16.0 + 41.0 * n4 / 180.0 - 127.0 * n5 / 288.0
                + 7891.0 * n6 / 37800.0,
            13.0 * n2 / 48.0 - 3.0 * n3 / 5.0 + 557.0 * n4 / 1440.0 + 281.0 * n5 / 630.0
                - 1983433.0 * n6 / 1935360.0,
            61.0 * n3 / 240.0 - 103.0 * n4 / 140.0 + 15061.0 * n5 / 26880.0
                + 167603.0 * n6 / 181440.0,
            49561.0 * n4 / 161280.0 - 179.0 * n5 / 168.0 + 6601661.0 * n6 / 7257600.0,
            34729.0 * n5 / 80640.0 - 3418889.0 * n6 / 1995840.0,
            212378941.0 * n6 / 319334400.0,
        ];
        let beta = [
            n / 2.0 - 2.0 * n2 / 3.0 + 37.0 * n3 / 96.0 - n4 / 360.0 - 81.0 * n5 / 512.0
                + 96199.0 * n6 / 604800.0,
            n2 / 48.0 + n3 / 15.0 - 437.0 * n4 / 1440.0 + 46.0 * n5 / 105.0
                - 1118711.0 * n6 / 3870720.0,
            17.0 * n3 / 480.0 - 37.0 * n4 / 840.0 - 209.0 * n5 / 4480.0 + 5569.0 * n6 / 90720.0,
            4397.0 * n4 / 161280.0 - 11.0 * n5 / 504.0 - 830251.0 * n6 / 7257600.0,
            4583.0 * n5 / 161280.0 - 108847.0 * n6 / 3991680.0,
            20648693.0 * n6 / 638668800.0,
        ];
        Series { e, a_rect, alpha, beta }
    })
}

pub fn utm_zone_of_lon(lon: f64) -> Result<u8, GridError> {
    if !(-180.0..180.0).contains(&lon) || lon.is_nan() {
        return Err(GridError::LongitudeOutOfRange(lon));
    }
    let z = ((lon + 180.0) / 6.0).floor() as i32 + 1;
    Ok(z.clamp(1, 60) as u8)
}

fn central_meridian(zone: u8) -> f64 {
    zone as f64 * 6.0 - 183.0
}

/// Projects into the zone containing `geo.lon`.
pub fn latlon_to_utm(geo: GeoCoord) -> Result<UtmCoord, GridError> {
    let zone = utm_zone_of_lon(geo.lon)?;
    latlon_to_utm_in_zone(geo, zone)
}

/// Projects into an explicit zone, which may be a neighbour of the natural one.
pub fn latlon_to_utm_in_zone(geo: GeoCoord, zone: u8) -> Result<UtmCoord, GridError> {
    if !(1..=60).contains(&zone) {
        return Err(GridError::ZoneOutOfRange(zone as i32));
    }
    if !(-80.0..=84.0).contains(&geo.lat) {
        return Err(GridError::LatitudeOutOfBand(geo.lat));
    }
    if geo.lat < 0.0 {
        return Err(GridError::SouthernHemisphere(geo.lat));
    }
    let s = series();
    let phi = geo.lat.to_radians();
    let mut dlon = geo.lon - central_meridian(zone);
    if dlon > 180.0 {
        dlon -= 360.0;
    } else if dlon < -180.0 {
        dlon += 360.0;
    }
    let lam = dlon.to_radians();

    let sin_phi = phi.sin();
    let t = (sin_phi.atanh() - s.e * (s.e * sin_phi).atanh()).sinh();
    let xi_p = t.atan2(lam.cos());
    let eta_p = (lam.sin() / (1.0 + t * t).sqrt()).atanh();

    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, a) in s.alpha.iter().enumerate() {
        let k = 2.0 * (j + 1) as f64;
        xi += a * (k * xi_p).sin() * (k * eta_p).cosh();
        eta += a * (k * xi_p).cos() * (k * eta_p).sinh();
    }
    let easting = FALSE_EASTING + K0 * s.a_rect * eta;
    let northing = (K0 * s.a_rect * xi).max(0.0);
    Ok(UtmCoord { zone, easting, northing })
}

pub fn utm_to_latlon(utm: UtmCoord) -> Result<GeoCoord, GridError> {
    if !(1..=60).contains(&utm.zone) {
        return Err(GridError::ZoneOutOfRange(utm.zone as i32));
    }
    if !(100_000.0..=900_000.0).contains(&utm.easting) {
        return Err(GridError::EastingOutOfZone(utm.easting));
    }
    if utm.northing < 0.0 {
        return Err(GridError::NegativeCoordinate { easting: utm.easting, northing: utm.northing });
    }
    let g = inverse_unchecked(utm.zone, utm.easting, utm.northing);
    if g.lat > 84.0 {
        return Err(GridError::LatitudeOutOfBand(g.lat));
    }
    Ok(g)
}

/// Inverse projection without range checks; longitudes are wrapped into -180..180.
pub(crate) fn inverse_unchecked(zone: u8, easting: f64, northing: f64) -> GeoCoord {
    let s = series();
    let xi = northing / (K0 * s.a_rect);
    let eta = (easting - FALSE_EASTING) / (K0 * s.a_rect);
    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, b) in s.beta.iter().enumerate() {
        let k = 2.0 * (j + 1) as f64;
        xi_p -= b * (k * xi).sin() * (k * eta).cosh();
        eta_p -= b * (k * xi).cos() * (k * eta).sinh();
    }
    let tau_p = xi_p.sin() / (eta_p.sinh().powi(2) + xi_p.cos().powi(2)).sqrt();
    let lam = eta_p.sinh().atan2(xi_p.cos());

    // Newton iteration for tan(phi) from the conformal tangent.
    let e2 = s.e * s.e;
    let mut tau = tau_p;
    for _ in 0..8 {
        let sigma = (s.e * (s.e * tau / (1.0 + tau * tau).sqrt()).atanh()).sinh();
        let tau_i = tau * (1.0 + sigma * sigma).sqrt() - sigma * (1.0 + tau * tau).sqrt();
        let d = (tau_p - tau_i) * (1.0 + (1.0 - e2) * tau * tau)
            / ((1.0 - e2) * (1.0 + tau_i * tau_i).sqrt() * (1.0 + tau * tau).sqrt());
        tau += d;
        if d.abs() < 1e-14 {
            break;
        }
    }
    let lat = tau.atan().to_degrees();
    let mut lon = central_meridian(zone) + lam.to_degrees();
    if lon >= 180.0 {
        lon -= 360.0;
    } else if lon < -180.0 {
        lon += 360.0;
    }
    GeoCoord { lat, lon }
}
